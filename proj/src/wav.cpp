#include "lowsup/wav.hpp"

#include "lowsup/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace lowsup {

namespace {

std::uint32_t read_u32(const std::string& b, std::size_t at) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(b[at])) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 1])) << 8 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 2])) << 16 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 3])) << 24;
}

std::uint16_t read_u16(const std::string& b, std::size_t at) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(b[at]) |
                                    static_cast<unsigned char>(b[at + 1]) << 8);
}

void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u16(std::string& b, std::uint16_t v) {
  b.push_back(static_cast<char>(v & 0xFF));
  b.push_back(static_cast<char>((v >> 8) & 0xFF));
}

}  // namespace

Audio read_wav(const std::string& path) {
  std::string b = read_file(path);
  if (b.size() < 12 || b.compare(0, 4, "RIFF") != 0 || b.compare(8, 4, "WAVE") != 0)
    throw ValidationError(path + ": not a RIFF/WAVE file");
  std::size_t pos = 12;
  int channels = 0, bits = 0, format = 0;
  Audio a;
  bool have_fmt = false;
  while (pos + 8 <= b.size()) {
    std::string id = b.substr(pos, 4);
    std::uint32_t size = read_u32(b, pos + 4);
    std::size_t body = pos + 8;
    if (body + size > b.size()) throw ValidationError(path + ": truncated chunk '" + id + "'");
    if (id == "fmt ") {
      if (size < 16) throw ValidationError(path + ": short fmt chunk");
      format = read_u16(b, body);
      channels = read_u16(b, body + 2);
      a.sample_rate = static_cast<int>(read_u32(b, body + 4));
      bits = read_u16(b, body + 14);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw ValidationError(path + ": data chunk before fmt chunk");
      if (format != 1 || channels != 1 || bits != 16)
        throw ValidationError(path + ": only 16-bit PCM mono is supported");
      std::size_t n = size / 2;
      a.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        auto v = static_cast<std::int16_t>(read_u16(b, body + 2 * i));
        a.samples[i] = v / 32768.0;
      }
      return a;
    }
    pos = body + size + (size & 1);
  }
  throw ValidationError(path + ": no data chunk");
}

std::vector<std::int16_t> quantize_pcm16(const std::vector<double>& samples) {
  std::vector<std::int16_t> out(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    double v = std::clamp(samples[i], -1.0, 32767.0 / 32768.0);
    out[i] = static_cast<std::int16_t>(std::lround(v * 32768.0));
  }
  return out;
}

void write_wav(const std::string& path, const Audio& audio) {
  auto pcm = quantize_pcm16(audio.samples);
  std::string b;
  auto data_bytes = static_cast<std::uint32_t>(pcm.size() * 2);
  b += "RIFF";
  put_u32(b, 36 + data_bytes);
  b += "WAVE";
  b += "fmt ";
  put_u32(b, 16);
  put_u16(b, 1);
  put_u16(b, 1);
  put_u32(b, static_cast<std::uint32_t>(audio.sample_rate));
  put_u32(b, static_cast<std::uint32_t>(audio.sample_rate) * 2);
  put_u16(b, 2);
  put_u16(b, 16);
  b += "data";
  put_u32(b, data_bytes);
  for (auto s : pcm) put_u16(b, static_cast<std::uint16_t>(s));
  write_file(path, b);
}

}  // namespace lowsup
