#pragma once

// File formats: RMAP tensor records, RMWT named-tensor checkpoints, CSV
// metrics and 8-bit PGM heatmaps with JSON scale sidecars.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rmap/grid.hpp"
#include "rmap/nn.hpp"
#include "rmap/tensor.hpp"

namespace rmap::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<char, 4> kTensorMagic{'R', 'M', 'A', 'P'};
inline constexpr std::array<char, 4> kCheckpointMagic{'R', 'M', 'W', 'T'};
inline constexpr std::uint16_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

struct TensorRecord {
  std::vector<std::uint32_t> shape;
  std::vector<float> data;

  std::size_t numel() const {
    std::size_t n = 1;
    for (std::uint32_t e : shape) n *= e;
    return n;
  }
  bool operator==(const TensorRecord&) const = default;
};

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(bytes.data(), bytes.size());
}

template <class U>
U get_le(std::istream& is, const char* what) {
  std::array<unsigned char, sizeof(U)> bytes{};
  if (!is.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw FormatError(std::string("truncated input while reading ") + what);
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes[i]) << (8 * i));
  return v;
}

inline void check_magic(std::istream& is, const std::array<char, 4>& magic) {
  std::array<char, 4> got{};
  if (!is.read(got.data(), 4) || got != magic) {
    throw FormatError("bad magic: expected " + std::string(magic.begin(), magic.end()));
  }
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const TensorRecord& rec) {
  if (rec.shape.empty() || rec.shape.size() > 255) throw std::invalid_argument("write_tensor: ndim must lie in [1, 255]");
  if (rec.numel() != rec.data.size()) throw std::invalid_argument("write_tensor: payload size does not match shape");
  os.write(kTensorMagic.data(), 4);
  detail::put_le<std::uint16_t>(os, kTensorVersion);
  detail::put_le<std::uint8_t>(os, kDtypeF32);
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(rec.shape.size()));
  for (std::uint32_t e : rec.shape) detail::put_le<std::uint32_t>(os, e);
  for (float f : rec.data) {
    std::uint32_t bits = 0;
    std::memcpy(&bits, &f, sizeof bits);
    detail::put_le<std::uint32_t>(os, bits);
  }
}

inline TensorRecord read_tensor(std::istream& is) {
  detail::check_magic(is, kTensorMagic);
  const auto version = detail::get_le<std::uint16_t>(is, "version");
  if (version != kTensorVersion) throw FormatError("unsupported tensor version " + std::to_string(version));
  const auto dtype = detail::get_le<std::uint8_t>(is, "dtype");
  if (dtype != kDtypeF32) throw FormatError("unsupported dtype " + std::to_string(dtype));
  const auto ndim = detail::get_le<std::uint8_t>(is, "ndim");
  if (ndim == 0) throw FormatError("tensor record with zero dimensions");
  TensorRecord rec;
  for (std::uint8_t i = 0; i < ndim; ++i) rec.shape.push_back(detail::get_le<std::uint32_t>(is, "extent"));
  rec.data.resize(rec.numel());
  for (float& f : rec.data) {
    const auto bits = detail::get_le<std::uint32_t>(is, "payload");
    std::memcpy(&f, &bits, sizeof f);
  }
  return rec;
}

/// Writes to a sibling temporary file and renames it over `path`, so readers
/// never observe a partial file.
template <class Writer>
void write_atomically(const std::filesystem::path& path, Writer&& writer, bool binary = true) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, binary ? std::ios::binary : std::ios::out);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    writer(os);
    os.flush();
    if (!os) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw std::runtime_error("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

inline void save_tensor(const std::filesystem::path& path, const TensorRecord& rec) {
  write_atomically(path, [&](std::ostream& os) { write_tensor(os, rec); });
}

inline TensorRecord load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_tensor(is);
}

using NamedRecords = std::vector<std::pair<std::string, TensorRecord>>;

inline void write_checkpoint(std::ostream& os, const NamedRecords& tensors) {
  os.write(kCheckpointMagic.data(), 4);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, rec] : tensors) {
    if (name.size() > 0xFFFF) throw std::invalid_argument("checkpoint: tensor name too long");
    detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, rec);
  }
}

inline NamedRecords read_checkpoint(std::istream& is) {
  detail::check_magic(is, kCheckpointMagic);
  const auto count = detail::get_le<std::uint32_t>(is, "tensor count");
  NamedRecords out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get_le<std::uint16_t>(is, "name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("truncated tensor name");
    out.emplace_back(std::move(name), read_tensor(is));
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const NamedRecords& tensors) {
  write_atomically(path, [&](std::ostream& os) { write_checkpoint(os, tensors); });
}

inline NamedRecords load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_checkpoint(is);
}

inline TensorRecord to_record(const Tensor& t) {
  TensorRecord rec;
  for (std::size_t e : t.shape()) rec.shape.push_back(static_cast<std::uint32_t>(e));
  rec.data.reserve(t.numel());
  for (double v : t.values()) rec.data.push_back(static_cast<float>(v));
  return rec;
}

inline NamedRecords to_records(const nn::ParamList& params) {
  NamedRecords out;
  for (const auto& p : params) out.emplace_back(p.name, to_record(p.tensor));
  return out;
}

/// Copies checkpoint values into parameters, matched by name and shape.
inline void load_into(const nn::ParamList& params, const NamedRecords& records) {
  if (params.size() != records.size()) {
    throw FormatError("checkpoint holds " + std::to_string(records.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, rec] = records[i];
    Tensor t = params[i].tensor;
    if (name != params[i].name) throw FormatError("checkpoint tensor '" + name + "' where '" + params[i].name + "' expected");
    Shape shape(rec.shape.begin(), rec.shape.end());
    if (shape != t.shape()) throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(shape));
    auto dst = t.mutable_values();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<double>(rec.data[j]);
  }
}

inline TensorRecord stacks_record(const std::vector<FrameStack>& stacks) {
  if (stacks.empty()) throw std::invalid_argument("stacks_record: no stacks");
  TensorRecord rec;
  const FrameStack& s0 = stacks[0];
  rec.shape = {static_cast<std::uint32_t>(stacks.size()), static_cast<std::uint32_t>(s0.frames),
               static_cast<std::uint32_t>(s0.rows), static_cast<std::uint32_t>(s0.cols)};
  for (const FrameStack& s : stacks) {
    require_same_shape(s, s0, "stacks_record");
    for (double v : s.values) rec.data.push_back(static_cast<float>(v));
  }
  return rec;
}

inline std::vector<FrameStack> record_stacks(const TensorRecord& rec) {
  if (rec.shape.size() != 4) throw FormatError("expected a 4-D slots × frames × rows × cols record");
  std::vector<FrameStack> out;
  const std::size_t per = std::size_t{rec.shape[1]} * rec.shape[2] * rec.shape[3];
  for (std::size_t s = 0; s < rec.shape[0]; ++s) {
    FrameStack st(rec.shape[1], rec.shape[2], rec.shape[3]);
    for (std::size_t i = 0; i < per; ++i) st.values[i] = static_cast<double>(rec.data[s * per + i]);
    out.push_back(std::move(st));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) : columns_(header.size()) { add(header); }

  void add(const std::vector<std::string>& row) {
    if (row.size() != columns_) throw std::invalid_argument("csv row has wrong column count");
    for (std::size_t i = 0; i < row.size(); ++i) text_ += (i ? "," : "") + csv_field(row[i]);
    text_ += "\r\n";
  }

  const std::string& text() const { return text_; }

  void save(const std::filesystem::path& path) const {
    write_atomically(path, [&](std::ostream& os) { os << text_; });
  }

 private:
  std::size_t columns_;
  std::string text_;
};

inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\r' || c == '\n') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      rows.push_back(std::move(row));
      row.clear();
      field.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void save_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_atomically(path, [&](std::ostream& os) { os << j.dump(2) << '\n'; }, false);
}

inline nlohmann::json load_json(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// PGM

struct GrayImage {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> pixels;
};

struct RenderScale {
  double min = 0.0;
  double max = 0.0;
  bool degenerate = false;
};

/// Min-max scales one frame to 0..255. A constant frame renders as mid-gray.
/// Overlay cells are painted at full intensity.
inline std::pair<GrayImage, RenderScale> render_frame(std::span<const double> values, std::size_t rows, std::size_t cols,
                                                      const std::vector<Cell>& overlay = {}) {
  if (values.size() != rows * cols || values.empty()) throw std::invalid_argument("render_frame: size mismatch");
  RenderScale sc;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  sc.min = *lo;
  sc.max = *hi;
  sc.degenerate = !(sc.max > sc.min);
  GrayImage img{rows, cols, std::vector<std::uint8_t>(values.size(), 128)};
  if (!sc.degenerate) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * (values[i] - sc.min) / (sc.max - sc.min)));
    }
  }
  for (const Cell& c : overlay) {
    if (c.row >= 0 && c.col >= 0 && static_cast<std::size_t>(c.row) < rows && static_cast<std::size_t>(c.col) < cols) {
      img.pixels[static_cast<std::size_t>(c.row) * cols + static_cast<std::size_t>(c.col)] = 255;
    }
  }
  return {std::move(img), sc};
}

inline void write_pgm(std::ostream& os, const GrayImage& img) {
  os << "P5 " << img.cols << ' ' << img.rows << " 255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

inline GrayImage read_pgm(std::istream& is) {
  std::string magic;
  std::size_t width = 0;
  std::size_t height = 0;
  int maxval = 0;
  if (!(is >> magic >> width >> height >> maxval) || magic != "P5" || maxval != 255 || width == 0 || height == 0) {
    throw FormatError("not an 8-bit binary PGM");
  }
  is.get();
  GrayImage img{height, width, std::vector<std::uint8_t>(width * height)};
  if (!is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()))) {
    throw FormatError("truncated PGM payload");
  }
  return img;
}

/// Writes `<stem>.pgm` and `<stem>.json` (scale sidecar).
inline void save_render(const std::filesystem::path& stem, const GrayImage& img, const RenderScale& sc) {
  std::filesystem::path pgm = stem;
  pgm += ".pgm";
  std::filesystem::path side = stem;
  side += ".json";
  write_atomically(pgm, [&](std::ostream& os) { write_pgm(os, img); });
  save_json(side, {{"min", sc.min}, {"max", sc.max}, {"degenerate_range", sc.degenerate}});
}

}  // namespace rmap::io
