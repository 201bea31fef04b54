#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "semnerf/image.hpp"
#include "semnerf/volume_renderer.hpp"

namespace semnerf {

/// Label id -> name. Ids are dense: names[i] names label i.
struct LabelTable {
  std::vector<std::string> names;

  int size() const { return static_cast<int>(names.size()); }
  /// background, skin, eye, mouth, ear, nose
  static LabelTable synthetic();
  friend bool operator==(const LabelTable&, const LabelTable&) = default;
};

struct SemanticMask {
  ByteGrid labels;
  LabelTable table;

  int height() const { return labels.height; }
  int width() const { return labels.width; }
  /// Every pixel's label must appear in the table.
  void validate() const;
};

/// n_labels binary planes, plane-major.
struct OneHotMask {
  int n_labels = 0;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> planes;

  std::uint8_t at(int label, int row, int col) const {
    return planes[(static_cast<std::size_t>(label) * height + row) * width + col];
  }
  ByteGrid plane(int label) const;
};

/// Normalized distance to the nearest contour pixel, in [0, 255].
struct DistanceField {
  int height = 0;
  int width = 0;
  std::vector<float> values;

  float at(int row, int col) const { return values[static_cast<std::size_t>(row) * width + col]; }
};

/// Encoder input, channels-last (row, col, channel): one-hot planes, contour, distance field.
struct EncoderInput {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  float at(int row, int col, int ch) const {
    return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }
};

constexpr int kDefaultContourThickness = 3;

OneHotMask one_hot(const SemanticMask& mask, int n_labels);
ByteGrid argmax_labels(const OneHotMask& onehot);

/// Pixels of one binary region that are 4-adjacent to a pixel outside it, or
/// (with `frame`) to the image border. Values 0/255.
ByteGrid region_boundary(const ByteGrid& region, bool frame = true);

/// Binary dilation with a disc of the given radius. Values 0/255.
ByteGrid dilate_disc(const ByteGrid& binary, int radius);

/// Union over labels of each label's boundary, stroked with `thickness`.
ByteGrid build_contour(const OneHotMask& onehot, int thickness = kDefaultContourThickness, bool frame = true);

/// Exact squared Euclidean distance from every pixel to the nearest nonzero pixel.
std::vector<std::int64_t> squared_distance_transform(const ByteGrid& contour);

/// Exact Euclidean distance transform, min-max normalized and scaled to 255.
DistanceField build_distance_field(const ByteGrid& contour);

/// Stacks one-hot + contour + distance field at `resolution`. Labels use
/// nearest-neighbor resampling, contour and distance use bilinear. All
/// channels lie in [0, 1].
EncoderInput assemble_input(const SemanticMask& mask, int n_labels, int resolution,
                            int thickness = kDefaultContourThickness);

ByteGrid resize_nearest(const ByteGrid& grid, int height, int width);
Image resize_bilinear(const Image& image, int height, int width);
ByteGrid center_crop(const ByteGrid& grid, int height, int width);
Image center_crop(const Image& image, int height, int width);

// Dataset directory: masks/NNNNN.png, images/NNNNN.png, poses.csv, labels.txt.

struct Sample {
  int id = 0;
  SemanticMask mask;
  Image image;
  CameraPose pose;
};

/// Optional load-time resize then center crop (0 disables each step).
struct LoadOptions {
  int resize = 0;
  int crop = 0;
};

std::string sample_name(int id);

LabelTable read_labels(const std::filesystem::path& path);
void write_labels(const std::filesystem::path& path, const LabelTable& table);

std::map<int, CameraPose> read_poses(const std::filesystem::path& path);
void write_poses(const std::filesystem::path& path, const std::map<int, CameraPose>& poses);

/// Reads one sample; the pose comes from poses.csv.
Sample load_sample(const std::filesystem::path& dir, int id, const LoadOptions& options = {});

/// Writes the mask and image files of one sample (not the pose table).
void save_sample_files(const std::filesystem::path& dir, const Sample& sample);

class Dataset {
 public:
  explicit Dataset(std::filesystem::path dir);

  const LabelTable& labels() const { return labels_; }
  const std::vector<int>& ids() const { return ids_; }
  std::size_t size() const { return ids_.size(); }
  const std::filesystem::path& dir() const { return dir_; }

  Sample load(int id, const LoadOptions& options = {}) const;
  const CameraPose& pose(int id) const;

 private:
  std::filesystem::path dir_;
  LabelTable labels_;
  std::map<int, CameraPose> poses_;
  std::vector<int> ids_;
};

}  // namespace semnerf
