#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "clustr/tensor.hpp"

namespace clustr::harness {

/// Labeled H x W x C images.
struct Dataset {
  std::size_t classes = 0;
  std::size_t size = 0;
  std::size_t channels = 3;
  std::vector<Tensor<double>> images;
  std::vector<std::size_t> labels;

  std::size_t count() const { return images.size(); }
  bool operator==(const Dataset&) const = default;
};

struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t n_per_class = 50;
  std::size_t size = 32;
  double noise = 0.3;
};

/// Class-conditional oriented gratings with random phase, a class-placed blob with jitter, per-class colour
/// weights and Gaussian noise. Image i has label i % classes. Throws ConfigError for size < 16 or no classes.
Dataset gen_synthetic_dataset(std::uint64_t seed, const SyntheticSpec& spec);

/// Reads root/<class>/*.ppm (binary P6, 8-bit); classes are the sorted subdirectory names. Pixels map to [-1, 1].
Dataset load_image_folder(const std::filesystem::path& root, std::size_t expected_size);

/// B x H x W x C tensor of the selected images.
Tensor<double> stack_images(const Dataset& data, const std::vector<std::size_t>& indices);

}  // namespace clustr::harness
