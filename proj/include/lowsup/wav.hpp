#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lowsup {

struct Audio {
  std::vector<double> samples;  // in [-1, 1)
  int sample_rate = 16000;

  double duration() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

/// Reads a 16-bit PCM mono RIFF/WAVE file.
Audio read_wav(const std::string& path);

/// Writes 16-bit PCM mono; samples are clipped to [-1, 1] and rounded.
void write_wav(const std::string& path, const Audio& audio);

std::vector<std::int16_t> quantize_pcm16(const std::vector<double>& samples);

}  // namespace lowsup
