#include "clustr/harness/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "clustr/rng.hpp"
#include "clustr/serialize.hpp"

namespace clustr::harness {

namespace {

struct ClassStyle {
  double angle;
  double frequency;
  double blob_y;
  double blob_x;
  double colour[3];
};

ClassStyle class_style(std::uint64_t seed, std::size_t c, std::size_t classes, std::size_t size) {
  CounterRng rng(seed, "dataset/class" + std::to_string(c));
  ClassStyle s{};
  s.angle = std::numbers::pi * static_cast<double>(c) / static_cast<double>(classes);
  s.frequency = 2.0 + static_cast<double>(c % 3);
  const double around = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(classes);
  const double radius = static_cast<double>(size) / 4.0, centre = static_cast<double>(size - 1) / 2.0;
  s.blob_y = centre + radius * std::sin(around);
  s.blob_x = centre + radius * std::cos(around);
  for (double& w : s.colour) w = 0.5 + 0.5 * rng.uniform();
  return s;
}

std::size_t read_header_number(std::istream& in) {
  std::string token;
  while (in >> token) {
    if (token[0] == '#') {
      std::getline(in, token);
      continue;
    }
    try {
      return std::stoul(token);
    } catch (const std::exception&) {
      break;
    }
  }
  throw FormatError("malformed PPM header");
}

Tensor<double> read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6") throw FormatError(path.string() + ": only binary P6 images are supported");
  const std::size_t width = read_header_number(in), height = read_header_number(in), maxval = read_header_number(in);
  if (maxval == 0 || maxval > 255) throw FormatError(path.string() + ": only 8-bit PPM is supported");
  in.get();
  std::vector<unsigned char> raw(width * height * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw FormatError(path.string() + ": truncated pixels");
  Tensor<double> img({height, width, 3});
  for (std::size_t i = 0; i < raw.size(); ++i) img[i] = 2.0 * raw[i] / static_cast<double>(maxval) - 1.0;
  return img;
}

}  // namespace

Dataset gen_synthetic_dataset(std::uint64_t seed, const SyntheticSpec& spec) {
  if (spec.size < 16) throw ConfigError("synthetic images must be at least 16 pixels wide");
  if (spec.classes == 0 || spec.n_per_class == 0) throw ConfigError("synthetic dataset needs classes and samples");
  const std::size_t s = spec.size, total = spec.classes * spec.n_per_class;
  std::vector<ClassStyle> styles;
  for (std::size_t c = 0; c < spec.classes; ++c) styles.push_back(class_style(seed, c, spec.classes, s));

  Dataset data;
  data.classes = spec.classes;
  data.size = s;
  CounterRng rng(seed, "dataset/samples");
  std::normal_distribution<double> noise(0.0, spec.noise);
  const double blob_sigma = static_cast<double>(s) / 10.0, jitter = static_cast<double>(s) / 8.0;
  for (std::size_t i = 0; i < total; ++i) {
    const std::size_t label = i % spec.classes;
    const auto& st = styles[label];
    const double phase = 2.0 * std::numbers::pi * rng.uniform();
    const double amplitude = 0.6 + 0.4 * rng.uniform();
    const double by = st.blob_y + jitter * (2.0 * rng.uniform() - 1.0);
    const double bx = st.blob_x + jitter * (2.0 * rng.uniform() - 1.0);
    const double blob = 0.6 + 0.4 * rng.uniform();
    const double dy = std::sin(st.angle), dx = std::cos(st.angle);
    const double k = 2.0 * std::numbers::pi * st.frequency / static_cast<double>(s);
    Tensor<double> img({s, s, 3});
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const double fy = static_cast<double>(y), fx = static_cast<double>(x);
        const double wave = amplitude * std::sin(k * (fx * dx + fy * dy) + phase);
        const double r2 = (fy - by) * (fy - by) + (fx - bx) * (fx - bx);
        const double bump = blob * std::exp(-r2 / (2.0 * blob_sigma * blob_sigma));
        for (std::size_t ch = 0; ch < 3; ++ch) {
          img[(y * s + x) * 3 + ch] = wave * st.colour[ch] + bump + noise(rng);
        }
      }
    }
    data.images.push_back(std::move(img));
    data.labels.push_back(label);
  }
  return data;
}

Dataset load_image_folder(const std::filesystem::path& root, std::size_t expected_size) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw ConfigError("image folder " + root.string() + " does not exist");
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw ConfigError("image folder " + root.string() + " has no class directories");
  Dataset data;
  data.classes = class_dirs.size();
  data.size = expected_size;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[c])) {
      if (entry.is_regular_file() && entry.path().extension() == ".ppm") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      auto img = read_ppm(f);
      if (img.dim(0) != expected_size || img.dim(1) != expected_size) {
        throw ConfigError(f.string() + " is not " + std::to_string(expected_size) + "x" +
                          std::to_string(expected_size));
      }
      data.images.push_back(std::move(img));
      data.labels.push_back(c);
    }
  }
  if (data.images.empty()) throw ConfigError("image folder " + root.string() + " contains no .ppm images");
  return data;
}

Tensor<double> stack_images(const Dataset& data, const std::vector<std::size_t>& indices) {
  const std::size_t per = data.size * data.size * data.channels;
  Tensor<double> out({indices.size(), data.size, data.size, data.channels});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto src = data.images.at(indices[b]).data();
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return out;
}

}  // namespace clustr::harness
