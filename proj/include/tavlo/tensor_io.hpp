#pragma once

// Binary formats.
//
// TAVLO-T4 tensor framing (all integers little-endian):
//   8 bytes  magic "TAVLO-T4"
//   u32      dtype code (1 = f32, 2 = f64, 3 = u8, 4 = u16)
//   4 x u64  dims (tensors of lower rank are padded with leading 1s)
//   payload  row-major elements, little-endian
//
// Keyed container (checkpoints): magic "TAVLO-KV", u32 entry count, then per
// entry u32 key length, key bytes, one T4 frame.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "tavlo/error.hpp"
#include "tavlo/tensor.hpp"

namespace tavlo::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

inline constexpr char kT4Magic[8] = {'T', 'A', 'V', 'L', 'O', '-', 'T', '4'};
inline constexpr char kKvMagic[8] = {'T', 'A', 'V', 'L', 'O', '-', 'K', 'V'};

enum class DType : std::uint32_t { kF32 = 1, kF64 = 2, kU8 = 3, kU16 = 4 };

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::kF32;
  else if constexpr (std::is_same_v<T, double>) return DType::kF64;
  else if constexpr (std::is_same_v<T, std::uint8_t>) return DType::kU8;
  else if constexpr (std::is_same_v<T, std::uint16_t>) return DType::kU16;
  else static_assert(sizeof(T) == 0, "unsupported dtype");
}

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kU8: return 1;
    case DType::kU16: return 2;
  }
  throw DataError("unknown T4 dtype code " + std::to_string(std::uint32_t(d)));
}

namespace detail {
template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("unexpected end of stream");
  return v;
}
inline std::array<std::uint64_t, 4> pad4(const Shape& s) {
  if (s.size() > 4) throw InvalidInput("T4 frames hold at most 4 dims");
  std::array<std::uint64_t, 4> d{1, 1, 1, 1};
  for (std::size_t i = 0; i < s.size(); ++i) d[4 - s.size() + i] = s[i];
  return d;
}
}  // namespace detail

// Raw frame: header + payload bytes, any dtype.
struct T4Frame {
  DType dtype = DType::kF32;
  std::array<std::uint64_t, 4> dims{1, 1, 1, 1};
  std::vector<char> payload;

  std::size_t numel() const { return dims[0] * dims[1] * dims[2] * dims[3]; }

  template <class T>
  Tensor<T> as(Shape shape = {}) const {
    if (shape.empty()) shape = {dims[0], dims[1], dims[2], dims[3]};
    if (shape_numel(shape) != numel())
      throw DataError("T4 frame with " + std::to_string(numel()) +
                      " elements cannot take shape " + shape_str(shape));
    Tensor<T> out(std::move(shape));
    auto convert = [&](auto tag) {
      using Src = decltype(tag);
      const Src* p = reinterpret_cast<const Src*>(payload.data());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(p[i]);
    };
    switch (dtype) {
      case DType::kF32: convert(float{}); break;
      case DType::kF64: convert(double{}); break;
      case DType::kU8: convert(std::uint8_t{}); break;
      case DType::kU16: convert(std::uint16_t{}); break;
    }
    return out;
  }
};

template <class T>
void write_t4(std::ostream& os, const Tensor<T>& t) {
  os.write(kT4Magic, 8);
  detail::put<std::uint32_t>(os, std::uint32_t(dtype_of<T>()));
  for (auto d : detail::pad4(t.shape())) detail::put<std::uint64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * sizeof(T)));
}

inline T4Frame read_t4(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kT4Magic, 8) != 0)
    throw DataError("bad T4 magic");
  T4Frame f;
  f.dtype = DType(detail::get<std::uint32_t>(is));
  for (auto& d : f.dims) d = detail::get<std::uint64_t>(is);
  f.payload.resize(f.numel() * dtype_size(f.dtype));
  is.read(f.payload.data(), std::streamsize(f.payload.size()));
  if (!is) throw DataError("truncated T4 payload");
  return f;
}

template <class T>
void save_t4(const std::filesystem::path& p, const Tensor<T>& t) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot open '" + p.string() + "' for writing");
  write_t4(os, t);
  if (!os) throw IoError("write failed: " + p.string());
}

inline T4Frame load_t4(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot open '" + p.string() + "'");
  return read_t4(is);
}

// Keyed collection of T4 frames, ordered by key.
class KeyedTensors {
 public:
  template <class T>
  void put(const std::string& key, const Tensor<T>& t) {
    std::ostringstream os;
    write_t4(os, t);
    std::istringstream is(os.str());
    entries_[key] = read_t4(is);
  }
  void put_text(const std::string& key, const std::string& text) {
    Tensor<std::uint8_t> t({text.size()});
    std::memcpy(t.data(), text.data(), text.size());
    put(key, t);
  }

  bool contains(const std::string& key) const { return entries_.count(key) > 0; }
  const T4Frame& frame(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw DataError("missing entry '" + key + "'");
    return it->second;
  }
  template <class T>
  Tensor<T> get(const std::string& key, Shape shape = {}) const {
    return frame(key).as<T>(std::move(shape));
  }
  std::string get_text(const std::string& key) const {
    const auto& f = frame(key);
    if (f.dtype != DType::kU8) throw DataError("entry '" + key + "' is not text");
    return std::string(f.payload.begin(), f.payload.end());
  }
  const std::map<std::string, T4Frame>& entries() const { return entries_; }

  void write(std::ostream& os) const {
    os.write(kKvMagic, 8);
    detail::put<std::uint32_t>(os, std::uint32_t(entries_.size()));
    for (const auto& [k, f] : entries_) {
      detail::put<std::uint32_t>(os, std::uint32_t(k.size()));
      os.write(k.data(), std::streamsize(k.size()));
      os.write(kT4Magic, 8);
      detail::put<std::uint32_t>(os, std::uint32_t(f.dtype));
      for (auto d : f.dims) detail::put<std::uint64_t>(os, d);
      os.write(f.payload.data(), std::streamsize(f.payload.size()));
    }
  }
  static KeyedTensors read(std::istream& is) {
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kKvMagic, 8) != 0)
      throw DataError("bad keyed-container magic");
    KeyedTensors kv;
    const auto n = detail::get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n; ++i) {
      const auto len = detail::get<std::uint32_t>(is);
      std::string key(len, '\0');
      is.read(key.data(), len);
      if (!is) throw DataError("truncated key");
      kv.entries_[key] = read_t4(is);
    }
    return kv;
  }
  void save(const std::filesystem::path& p) const {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw IoError("cannot open '" + p.string() + "' for writing");
    write(os);
    if (!os) throw IoError("write failed: " + p.string());
  }
  static KeyedTensors load(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw IoError("cannot open '" + p.string() + "'");
    return read(is);
  }

 private:
  std::map<std::string, T4Frame> entries_;
};

// ------------------------------------------------------------------- audio

struct WavData {
  std::vector<double> samples;  // mono
  int sample_rate = 0;
};

// Mono 32-bit float WAV.
inline void write_wav_f32(const std::filesystem::path& p,
                          const std::vector<double>& samples, int sample_rate) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot open '" + p.string() + "' for writing");
  const std::uint32_t data_bytes = std::uint32_t(samples.size() * 4);
  os.write("RIFF", 4);
  detail::put<std::uint32_t>(os, 36 + data_bytes);
  os.write("WAVEfmt ", 8);
  detail::put<std::uint32_t>(os, 16);
  detail::put<std::uint16_t>(os, 3);  // IEEE float
  detail::put<std::uint16_t>(os, 1);
  detail::put<std::uint32_t>(os, std::uint32_t(sample_rate));
  detail::put<std::uint32_t>(os, std::uint32_t(sample_rate) * 4);
  detail::put<std::uint16_t>(os, 4);
  detail::put<std::uint16_t>(os, 32);
  os.write("data", 4);
  detail::put<std::uint32_t>(os, data_bytes);
  for (double s : samples) detail::put<float>(os, float(s));
  if (!os) throw IoError("write failed: " + p.string());
}

// Reads PCM16 or float32 WAV; multi-channel input is averaged to mono.
inline WavData read_wav(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot open '" + p.string() + "'");
  char tag[4];
  is.read(tag, 4);
  if (!is || std::memcmp(tag, "RIFF", 4) != 0) throw DataError("not a RIFF file: " + p.string());
  detail::get<std::uint32_t>(is);
  is.read(tag, 4);
  if (!is || std::memcmp(tag, "WAVE", 4) != 0) throw DataError("not a WAVE file: " + p.string());
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  WavData out;
  for (;;) {
    is.read(tag, 4);
    if (!is) throw DataError("WAV without data chunk: " + p.string());
    const auto size = detail::get<std::uint32_t>(is);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      format = detail::get<std::uint16_t>(is);
      channels = detail::get<std::uint16_t>(is);
      rate = detail::get<std::uint32_t>(is);
      detail::get<std::uint32_t>(is);
      detail::get<std::uint16_t>(is);
      bits = detail::get<std::uint16_t>(is);
      is.ignore(size - 16);
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (channels == 0) throw DataError("WAV data before fmt chunk");
      const bool f32 = format == 3 && bits == 32;
      const bool s16 = format == 1 && bits == 16;
      if (!f32 && !s16) throw DataError("unsupported WAV encoding (need PCM16 or float32)");
      const std::size_t bytes = bits / 8;
      const std::size_t frames = size / (bytes * channels);
      out.samples.assign(frames, 0.0);
      for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0;
        for (std::size_t c = 0; c < channels; ++c)
          acc += f32 ? double(detail::get<float>(is))
                     : double(detail::get<std::int16_t>(is)) / 32768.0;
        out.samples[i] = acc / channels;
      }
      out.sample_rate = int(rate);
      return out;
    } else {
      is.ignore(size + (size & 1));
    }
  }
}

// Raw little-endian float32 samples.
inline std::vector<double> read_raw_f32(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary | std::ios::ate);
  if (!is) throw IoError("cannot open '" + p.string() + "'");
  const auto bytes = std::size_t(is.tellg());
  is.seekg(0);
  std::vector<float> buf(bytes / 4);
  is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * 4));
  return {buf.begin(), buf.end()};
}

// ------------------------------------------------------------------ images

// Binary PGM (P5); maxval 255 writes 8-bit, otherwise 16-bit big-endian.
inline void write_pgm(const std::filesystem::path& p, std::size_t width,
                      std::size_t height, const std::vector<std::uint16_t>& px,
                      std::uint16_t maxval) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot open '" + p.string() + "' for writing");
  os << "P5\n" << width << ' ' << height << '\n' << maxval << '\n';
  for (auto v : px) {
    if (maxval < 256) {
      os.put(char(v));
    } else {
      os.put(char(v >> 8));
      os.put(char(v & 0xff));
    }
  }
  if (!os) throw IoError("write failed: " + p.string());
}

inline void write_ppm(const std::filesystem::path& p, std::size_t width,
                      std::size_t height, const std::vector<std::uint8_t>& rgb) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot open '" + p.string() + "' for writing");
  os << "P6\n" << width << ' ' << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(rgb.data()), std::streamsize(rgb.size()));
  if (!os) throw IoError("write failed: " + p.string());
}

struct Image {
  std::size_t width = 0, height = 0, channels = 0;
  std::uint32_t maxval = 255;
  std::vector<std::uint16_t> px;  // row-major, interleaved channels
};

// Reads binary PGM (P5) or PPM (P6), 8- or 16-bit.
inline Image read_netpbm(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot open '" + p.string() + "'");
  std::string magic;
  is >> magic;
  Image img;
  if (magic == "P5") img.channels = 1;
  else if (magic == "P6") img.channels = 3;
  else throw DataError("unsupported image format in " + p.string());
  auto next_int = [&]() {
    is >> std::ws;
    while (is.peek() == '#') {
      std::string line;
      std::getline(is, line);
      is >> std::ws;
    }
    std::size_t v;
    is >> v;
    if (!is) throw DataError("bad netpbm header in " + p.string());
    return v;
  };
  img.width = next_int();
  img.height = next_int();
  img.maxval = std::uint32_t(next_int());
  is.get();
  const std::size_t n = img.width * img.height * img.channels;
  img.px.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (img.maxval < 256) {
      img.px[i] = std::uint8_t(is.get());
    } else {
      const int hi = is.get(), lo = is.get();
      img.px[i] = std::uint16_t((hi << 8) | lo);
    }
  }
  if (!is) throw DataError("truncated image " + p.string());
  return img;
}

}  // namespace tavlo::io
