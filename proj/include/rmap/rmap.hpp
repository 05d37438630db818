#pragma once

#include "rmap/tensor.hpp"
#include "rmap/optim.hpp"
#include "rmap/nn.hpp"
#include "rmap/grid.hpp"
#include "rmap/propagation.hpp"
#include "rmap/sensing.hpp"
#include "rmap/recmae.hpp"
#include "rmap/kriging.hpp"
#include "rmap/cartoenv.hpp"
#include "rmap/madp.hpp"
