#include "dvmvs/dataset.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace dvmvs {

namespace fs = std::filesystem;

namespace {

struct PngError {
  std::jmp_buf jump;
  char message[256] = {0};
};

void on_png_error(png_structp png, png_const_charp message) {
  auto* error = static_cast<PngError*>(png_get_error_ptr(png));
  std::snprintf(error->message, sizeof(error->message), "%s", message);
  std::longjmp(error->jump, 1);
}

void on_png_warning(png_structp, png_const_charp) {}

struct File {
  std::FILE* handle = nullptr;
  ~File() {
    if (handle) std::fclose(handle);
  }
};

// Writes rows of `channels` samples at `bit_depth` bits (8 or 16, big endian
// for 16 as PNG stores it).
void write_png(const fs::path& path, int width, int height, int color_type, int bit_depth,
               const std::vector<std::uint8_t>& bytes, std::size_t row_bytes) {
  File file;
  file.handle = std::fopen(path.c_str(), "wb");
  if (!file.handle) throw DatasetError("cannot write " + path.string());
  PngError error;
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, on_png_error, on_png_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, nullptr);
    throw DatasetError("libpng initialization failed for " + path.string());
  }
  if (setjmp(error.jump)) {
    png_destroy_write_struct(&png, &info);
    throw DatasetError("PNG write error in " + path.string() + ": " + error.message);
  }
  png_init_io(png, file.handle);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, bytes.data() + static_cast<std::size_t>(y) * row_bytes);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct PngData {
  int width = 0;
  int height = 0;
  int color_type = 0;
  int bit_depth = 0;
  std::size_t row_bytes = 0;
  std::vector<std::uint8_t> bytes;
};

void read_png_into(const fs::path& path, PngData& out) {
  File file;
  file.handle = std::fopen(path.c_str(), "rb");
  if (!file.handle) throw DatasetError("cannot open " + path.string());
  unsigned char signature[8];
  if (std::fread(signature, 1, 8, file.handle) != 8 || png_sig_cmp(signature, 0, 8) != 0) {
    throw DatasetError(path.string() + " is not a PNG file");
  }
  PngError error;
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, on_png_error, on_png_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DatasetError("libpng initialization failed for " + path.string());
  }
  if (setjmp(error.jump)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DatasetError("PNG read error in " + path.string() + ": " + error.message);
  }
  png_init_io(png, file.handle);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.color_type = png_get_color_type(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  if (out.color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (out.color_type == PNG_COLOR_TYPE_GRAY && out.bit_depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  png_read_update_info(png, info);
  out.color_type = png_get_color_type(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  out.row_bytes = png_get_rowbytes(png, info);
  out.bytes.resize(out.row_bytes * static_cast<std::size_t>(out.height));
  for (int y = 0; y < out.height; ++y) {
    png_read_row(png, out.bytes.data() + static_cast<std::size_t>(y) * out.row_bytes, nullptr);
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
}

int channel_count(int color_type) {
  switch (color_type) {
    case PNG_COLOR_TYPE_GRAY: return 1;
    case PNG_COLOR_TYPE_GRAY_ALPHA: return 2;
    case PNG_COLOR_TYPE_RGB: return 3;
    case PNG_COLOR_TYPE_RGB_ALPHA: return 4;
    default: return 0;
  }
}

}  // namespace

void write_rgb_png(const fs::path& path, const RgbImage& image) {
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * 3) {
    throw ContractViolation("write_rgb_png: pixel buffer does not match the size");
  }
  write_png(path, image.width, image.height, PNG_COLOR_TYPE_RGB, 8, image.pixels,
            static_cast<std::size_t>(image.width) * 3);
}

RgbImage read_rgb_png(const fs::path& path) {
  PngData data;
  read_png_into(path, data);
  const int channels = channel_count(data.color_type);
  if (data.bit_depth != 8 || (channels != 3 && channels != 4 && channels != 1)) {
    throw DatasetError(path.string() + ": expected an 8-bit color image");
  }
  RgbImage image;
  image.width = data.width;
  image.height = data.height;
  image.pixels.resize(static_cast<std::size_t>(data.width) * data.height * 3);
  for (int y = 0; y < data.height; ++y) {
    const std::uint8_t* row = data.bytes.data() + static_cast<std::size_t>(y) * data.row_bytes;
    for (int x = 0; x < data.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const int src = channels == 1 ? 0 : c;
        image.pixels[(static_cast<std::size_t>(y) * data.width + x) * 3 + c] =
            row[x * channels + src];
      }
    }
  }
  return image;
}

DepthWriteResult save_depth(const fs::path& path, const DepthMap& depth) {
  if (depth.values.size() != static_cast<std::size_t>(depth.width) * depth.height ||
      depth.valid.size() != depth.values.size()) {
    throw ContractViolation("save_depth: malformed depth map");
  }
  DepthWriteResult result;
  std::vector<std::uint8_t> bytes(depth.values.size() * 2);
  for (std::size_t i = 0; i < depth.values.size(); ++i) {
    std::uint16_t mm = 0;
    if (depth.valid[i] && std::isfinite(depth.values[i]) && depth.values[i] > 0.0) {
      const double scaled = std::round(depth.values[i] * kDepthPngScale);
      if (scaled > 65535.0) {
        mm = 65535;
        ++result.saturated;
      } else if (scaled < 1.0) {
        ++result.underflow;
      } else {
        mm = static_cast<std::uint16_t>(scaled);
      }
    }
    bytes[2 * i] = static_cast<std::uint8_t>(mm >> 8);
    bytes[2 * i + 1] = static_cast<std::uint8_t>(mm & 0xff);
  }
  write_png(path, depth.width, depth.height, PNG_COLOR_TYPE_GRAY, 16, bytes,
            static_cast<std::size_t>(depth.width) * 2);
  fs::path sidecar = path;
  sidecar += ".saturation.txt";
  if (result.saturated > 0 || result.underflow > 0) {
    std::ofstream note(sidecar);
    if (!note) throw DatasetError("cannot write " + sidecar.string());
    note << "saturated " << result.saturated << "\nunderflow " << result.underflow << "\n";
  } else {
    std::error_code ignored;
    fs::remove(sidecar, ignored);
  }
  return result;
}

DepthMap load_depth(const fs::path& path) {
  PngData data;
  read_png_into(path, data);
  if (data.bit_depth != 16 || data.color_type != PNG_COLOR_TYPE_GRAY) {
    throw DatasetError(path.string() + ": expected a 16-bit grayscale depth image");
  }
  DepthMap depth(data.width, data.height);
  for (int y = 0; y < data.height; ++y) {
    const std::uint8_t* row = data.bytes.data() + static_cast<std::size_t>(y) * data.row_bytes;
    for (int x = 0; x < data.width; ++x) {
      const int mm = (row[2 * x] << 8) | row[2 * x + 1];
      const std::size_t i = static_cast<std::size_t>(y) * data.width + x;
      depth.values[i] = mm / kDepthPngScale;
      depth.valid[i] = mm > 0 ? 1 : 0;
    }
  }
  return depth;
}

std::string frame_file_name(std::size_t index) {
  std::ostringstream name;
  name << std::setw(6) << std::setfill('0') << index << ".png";
  return name.str();
}

void save_sequence(const fs::path& directory, const Sequence& sequence) {
  fs::create_directories(directory / "images");
  const bool with_depth = std::any_of(sequence.frames.begin(), sequence.frames.end(),
                                      [](const Frame& f) { return f.depth.width > 0; });
  if (with_depth) fs::create_directories(directory / "depth");
  {
    std::ofstream out(directory / "intrinsics.txt");
    if (!out) throw DatasetError("cannot write " + (directory / "intrinsics.txt").string());
    const auto& k = sequence.intrinsics;
    out << std::setprecision(17) << k.fx << ' ' << k.fy << ' ' << k.cx << ' ' << k.cy << ' '
        << k.width << ' ' << k.height << '\n';
  }
  std::ofstream poses(directory / "poses.txt");
  if (!poses) throw DatasetError("cannot write " + (directory / "poses.txt").string());
  poses << std::setprecision(17);
  for (std::size_t i = 0; i < sequence.frames.size(); ++i) {
    const Frame& frame = sequence.frames[i];
    const Eigen::Matrix4d m = frame.pose.matrix();
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) poses << m(r, c) << (r == 3 && c == 3 ? '\n' : ' ');
    }
    write_rgb_png(directory / "images" / frame_file_name(i), frame.image);
    if (with_depth) save_depth(directory / "depth" / frame_file_name(i), frame.depth);
  }
}

namespace {

std::vector<fs::path> png_files(const fs::path& directory) {
  std::vector<fs::path> files;
  if (!fs::is_directory(directory)) return files;
  for (const auto& entry : fs::directory_iterator(directory)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace

Sequence load_sequence(const fs::path& directory, bool require_depth) {
  Sequence sequence;
  sequence.name = directory.filename().string();
  {
    std::ifstream in(directory / "intrinsics.txt");
    if (!in) throw DatasetError(directory.string() + ": missing intrinsics.txt");
    auto& k = sequence.intrinsics;
    if (!(in >> k.fx >> k.fy >> k.cx >> k.cy >> k.width >> k.height)) {
      throw DatasetError(directory.string() +
                         ": intrinsics.txt must hold fx fy cx cy width height");
    }
    try {
      k.validate();
    } catch (const std::exception& e) {
      throw DatasetError(directory.string() + ": invalid intrinsics: " + e.what());
    }
    if (k.width % 64 != 0 || k.height % 64 != 0) {
      throw DatasetError(directory.string() + ": image size " + std::to_string(k.width) + "x" +
                         std::to_string(k.height) + " is not divisible by 64");
    }
  }
  std::vector<Pose> poses;
  {
    std::ifstream in(directory / "poses.txt");
    if (!in) throw DatasetError(directory.string() + ": missing poses.txt");
    std::string line;
    int line_number = 0;
    while (std::getline(in, line)) {
      ++line_number;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      std::istringstream row(line);
      Eigen::Matrix4d m;
      for (int i = 0; i < 16; ++i) {
        std::string token;
        if (!(row >> token)) {
          throw DatasetError(directory.string() + ": poses.txt line " +
                             std::to_string(line_number) + " has fewer than 16 values");
        }
        double value = 0.0;
        try {
          std::size_t used = 0;
          value = std::stod(token, &used);
          if (used != token.size()) throw std::invalid_argument(token);
        } catch (const std::exception&) {
          throw DatasetError(directory.string() + ": poses.txt line " +
                             std::to_string(line_number) + " has a malformed value '" + token +
                             "'");
        }
        if (!std::isfinite(value)) {
          throw DatasetError(directory.string() + ": poses.txt line " +
                             std::to_string(line_number) + " has a non-finite entry");
        }
        m(i / 4, i % 4) = value;
      }
      const Pose pose = Pose::from_matrix(m);
      if (!pose.is_valid(1e-6)) {
        throw DatasetError(directory.string() + ": poses.txt line " +
                           std::to_string(line_number) + " is not a rigid transform");
      }
      poses.push_back(pose);
    }
  }
  const auto images = png_files(directory / "images");
  const auto depths = png_files(directory / "depth");
  if (poses.size() != images.size()) {
    throw DatasetError(directory.string() + ": poses.txt has " + std::to_string(poses.size()) +
                       " poses but images/ has " + std::to_string(images.size()) + " images");
  }
  if (require_depth && depths.size() != images.size()) {
    throw DatasetError(directory.string() + ": images/ has " + std::to_string(images.size()) +
                       " images but depth/ has " + std::to_string(depths.size()) +
                       " depth maps");
  }
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].filename() != frame_file_name(i)) {
      throw DatasetError(directory.string() + ": expected images/" + frame_file_name(i) +
                         ", found " + images[i].filename().string());
    }
    Frame frame;
    frame.pose = poses[i];
    frame.image = read_rgb_png(images[i]);
    if (frame.image.width != sequence.intrinsics.width ||
        frame.image.height != sequence.intrinsics.height) {
      throw DatasetError(images[i].string() + ": size does not match intrinsics.txt");
    }
    if (i < depths.size()) {
      if (depths[i].filename() != images[i].filename()) {
        throw DatasetError(directory.string() + ": depth/" + depths[i].filename().string() +
                           " does not pair with images/" + images[i].filename().string());
      }
      frame.depth = load_depth(depths[i]);
      if (frame.depth.width != frame.image.width || frame.depth.height != frame.image.height) {
        throw DatasetError(depths[i].string() + ": size does not match the color image");
      }
    }
    sequence.frames.push_back(std::move(frame));
  }
  return sequence;
}

std::vector<Sequence> load_dataset(const fs::path& root, bool require_depth) {
  if (fs::exists(root / "intrinsics.txt")) return {load_sequence(root, require_depth)};
  if (!fs::is_directory(root)) throw DatasetError(root.string() + " is not a directory");
  std::vector<fs::path> directories;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && fs::exists(entry.path() / "intrinsics.txt")) {
      directories.push_back(entry.path());
    }
  }
  if (directories.empty()) throw DatasetError(root.string() + ": no sequences found");
  std::sort(directories.begin(), directories.end());
  std::vector<Sequence> sequences;
  for (const auto& d : directories) sequences.push_back(load_sequence(d, require_depth));
  return sequences;
}

Tensor images_to_tensor(const std::vector<const RgbImage*>& images) {
  if (images.empty()) throw ContractViolation("images_to_tensor: no images");
  const int width = images.front()->width;
  const int height = images.front()->height;
  const std::size_t plane = static_cast<std::size_t>(width) * height;
  std::vector<double> values(images.size() * 3 * plane);
  for (std::size_t b = 0; b < images.size(); ++b) {
    const RgbImage& image = *images[b];
    if (image.width != width || image.height != height) {
      throw ContractViolation("images_to_tensor: images differ in size");
    }
    for (std::size_t p = 0; p < plane; ++p) {
      for (int c = 0; c < 3; ++c) {
        values[(b * 3 + c) * plane + p] = (image.pixels[p * 3 + c] / 255.0 - 0.5) / 0.25;
      }
    }
  }
  return Tensor::from({static_cast<int>(images.size()), 3, height, width}, std::move(values));
}

}  // namespace dvmvs
