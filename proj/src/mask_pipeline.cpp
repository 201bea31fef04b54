#include "semnerf/mask_pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "semnerf/errors.hpp"

namespace semnerf {

LabelTable LabelTable::synthetic() { return {{"background", "skin", "eye", "mouth", "ear", "nose"}}; }

void SemanticMask::validate() const {
  require(labels.height > 0 && labels.width > 0, ErrorKind::kData, "mask: empty label grid");
  require(labels.data.size() == static_cast<std::size_t>(labels.height) * labels.width, ErrorKind::kData,
          "mask: grid size does not match its dimensions");
  for (int r = 0; r < labels.height; ++r) {
    for (int c = 0; c < labels.width; ++c) {
      require(labels.at(r, c) < table.size(), ErrorKind::kData,
              "mask: label " + std::to_string(labels.at(r, c)) + " at (" + std::to_string(r) + ", " +
                  std::to_string(c) + ") is not in the label table");
    }
  }
}

ByteGrid OneHotMask::plane(int label) const {
  ByteGrid g(height, width);
  const std::size_t n = static_cast<std::size_t>(height) * width;
  std::copy_n(planes.begin() + static_cast<std::ptrdiff_t>(label * n), n, g.data.begin());
  return g;
}

OneHotMask one_hot(const SemanticMask& mask, int n_labels) {
  require(n_labels >= 1 && n_labels <= 256, ErrorKind::kInput, "one_hot: label count must lie in [1, 256]");
  OneHotMask out{n_labels, mask.height(), mask.width(), {}};
  const std::size_t n = static_cast<std::size_t>(out.height) * out.width;
  out.planes.assign(n * n_labels, 0);
  for (int r = 0; r < out.height; ++r) {
    for (int c = 0; c < out.width; ++c) {
      const int label = mask.labels.at(r, c);
      require(label < n_labels, ErrorKind::kData,
              "one_hot: label " + std::to_string(label) + " at (" + std::to_string(r) + ", " + std::to_string(c) +
                  ") exceeds label count " + std::to_string(n_labels));
      out.planes[label * n + static_cast<std::size_t>(r) * out.width + c] = 1;
    }
  }
  return out;
}

ByteGrid argmax_labels(const OneHotMask& onehot) {
  ByteGrid out(onehot.height, onehot.width);
  for (int r = 0; r < onehot.height; ++r) {
    for (int c = 0; c < onehot.width; ++c) {
      int best = 0;
      for (int l = 1; l < onehot.n_labels; ++l) {
        if (onehot.at(l, r, c) > onehot.at(best, r, c)) best = l;
      }
      out.at(r, c) = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

ByteGrid region_boundary(const ByteGrid& region, bool frame) {
  ByteGrid out(region.height, region.width);
  constexpr int kDr[] = {-1, 1, 0, 0};
  constexpr int kDc[] = {0, 0, -1, 1};
  for (int r = 0; r < region.height; ++r) {
    for (int c = 0; c < region.width; ++c) {
      if (region.at(r, c) == 0) continue;
      for (int k = 0; k < 4; ++k) {
        const int rr = r + kDr[k], cc = c + kDc[k];
        const bool outside = rr < 0 || cc < 0 || rr >= region.height || cc >= region.width;
        if ((outside && frame) || (!outside && region.at(rr, cc) == 0)) {
          out.at(r, c) = 255;
          break;
        }
      }
    }
  }
  return out;
}

ByteGrid dilate_disc(const ByteGrid& binary, int radius) {
  require(radius >= 0, ErrorKind::kInput, "dilate_disc: radius must be nonnegative");
  if (radius == 0) return binary;
  std::vector<std::pair<int, int>> offsets;
  for (int dr = -radius; dr <= radius; ++dr) {
    for (int dc = -radius; dc <= radius; ++dc) {
      if (dr * dr + dc * dc <= radius * radius) offsets.emplace_back(dr, dc);
    }
  }
  ByteGrid out(binary.height, binary.width);
  for (int r = 0; r < binary.height; ++r) {
    for (int c = 0; c < binary.width; ++c) {
      if (binary.at(r, c) == 0) continue;
      for (const auto& [dr, dc] : offsets) {
        const int rr = r + dr, cc = c + dc;
        if (rr >= 0 && cc >= 0 && rr < binary.height && cc < binary.width) out.at(rr, cc) = 255;
      }
    }
  }
  return out;
}

ByteGrid build_contour(const OneHotMask& onehot, int thickness, bool frame) {
  require(thickness >= 1, ErrorKind::kInput, "build_contour: thickness must be at least 1");
  ByteGrid edges(onehot.height, onehot.width);
  for (int l = 0; l < onehot.n_labels; ++l) {
    const ByteGrid b = region_boundary(onehot.plane(l), frame);
    for (std::size_t i = 0; i < edges.data.size(); ++i) edges.data[i] |= b.data[i];
  }
  return dilate_disc(edges, thickness / 2);
}

namespace {

constexpr std::int64_t kUnreached = std::numeric_limits<std::int64_t>::max();

// Lower envelope of parabolas (q - v)^2 + f[v] over the finite sites.
void distance_1d(const std::vector<std::int64_t>& f, std::vector<std::int64_t>& d) {
  const int n = static_cast<int>(f.size());
  std::vector<int> v;
  std::vector<double> z;
  v.reserve(n);
  z.reserve(n + 1);
  auto intersect = [&](int q, int p) {
    return static_cast<double>((f[q] + std::int64_t(q) * q) - (f[p] + std::int64_t(p) * p)) / (2.0 * (q - p));
  };
  for (int q = 0; q < n; ++q) {
    if (f[q] == kUnreached) continue;
    if (v.empty()) {
      v.push_back(q);
      z.push_back(-std::numeric_limits<double>::infinity());
      continue;
    }
    double s = intersect(q, v.back());
    while (s <= z.back()) {
      v.pop_back();
      z.pop_back();
      s = intersect(q, v.back());
    }
    v.push_back(q);
    z.push_back(s);
  }
  if (v.empty()) {
    std::fill(d.begin(), d.end(), kUnreached);
    return;
  }
  std::size_t k = 0;
  for (int q = 0; q < n; ++q) {
    while (k + 1 < v.size() && z[k + 1] < q) ++k;
    const std::int64_t dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

}  // namespace

std::vector<std::int64_t> squared_distance_transform(const ByteGrid& contour) {
  const int h = contour.height, w = contour.width;
  std::vector<std::int64_t> grid(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = contour.data[i] != 0 ? 0 : kUnreached;

  std::vector<std::int64_t> f(h), d(h);
  for (int c = 0; c < w; ++c) {
    for (int r = 0; r < h; ++r) f[r] = grid[static_cast<std::size_t>(r) * w + c];
    distance_1d(f, d);
    for (int r = 0; r < h; ++r) grid[static_cast<std::size_t>(r) * w + c] = d[r];
  }
  f.resize(w);
  d.resize(w);
  for (int r = 0; r < h; ++r) {
    std::copy_n(grid.begin() + static_cast<std::ptrdiff_t>(r) * w, w, f.begin());
    distance_1d(f, d);
    std::copy(d.begin(), d.end(), grid.begin() + static_cast<std::ptrdiff_t>(r) * w);
  }
  return grid;
}

DistanceField build_distance_field(const ByteGrid& contour) {
  require(std::any_of(contour.data.begin(), contour.data.end(), [](std::uint8_t v) { return v != 0; }),
          ErrorKind::kData, "distance field: contour has no nonzero pixel, cannot normalize");
  const auto sq = squared_distance_transform(contour);
  DistanceField out{contour.height, contour.width, std::vector<float>(sq.size())};
  const double max_distance = std::sqrt(static_cast<double>(*std::max_element(sq.begin(), sq.end())));
  for (std::size_t i = 0; i < sq.size(); ++i) {
    const double dist = std::sqrt(static_cast<double>(sq[i]));
    out.values[i] = max_distance > 0.0 ? static_cast<float>(255.0 * dist / max_distance) : 0.0f;
  }
  return out;
}

ByteGrid resize_nearest(const ByteGrid& grid, int height, int width) {
  require(height > 0 && width > 0, ErrorKind::kInput, "resize: target size must be positive");
  ByteGrid out(height, width);
  for (int r = 0; r < height; ++r) {
    const int sr = std::min(grid.height - 1, static_cast<int>((r + 0.5) * grid.height / height));
    for (int c = 0; c < width; ++c) {
      const int sc = std::min(grid.width - 1, static_cast<int>((c + 0.5) * grid.width / width));
      out.at(r, c) = grid.at(sr, sc);
    }
  }
  return out;
}

Image resize_bilinear(const Image& image, int height, int width) {
  require(height > 0 && width > 0, ErrorKind::kInput, "resize: target size must be positive");
  if (height == image.height && width == image.width) return image;
  Image out(height, width, image.channels);
  for (int r = 0; r < height; ++r) {
    const double y = std::clamp((r + 0.5) * image.height / height - 0.5, 0.0, image.height - 1.0);
    const int y0 = static_cast<int>(y), y1 = std::min(y0 + 1, image.height - 1);
    const double wy = y - y0;
    for (int c = 0; c < width; ++c) {
      const double x = std::clamp((c + 0.5) * image.width / width - 0.5, 0.0, image.width - 1.0);
      const int x0 = static_cast<int>(x), x1 = std::min(x0 + 1, image.width - 1);
      const double wx = x - x0;
      for (int ch = 0; ch < image.channels; ++ch) {
        const double top = (1 - wx) * image.at(y0, x0, ch) + wx * image.at(y0, x1, ch);
        const double bottom = (1 - wx) * image.at(y1, x0, ch) + wx * image.at(y1, x1, ch);
        out.at(r, c, ch) = static_cast<float>((1 - wy) * top + wy * bottom);
      }
    }
  }
  return out;
}

ByteGrid center_crop(const ByteGrid& grid, int height, int width) {
  require(height > 0 && width > 0 && height <= grid.height && width <= grid.width, ErrorKind::kInput,
          "center_crop: crop larger than the grid");
  const int r0 = (grid.height - height) / 2, c0 = (grid.width - width) / 2;
  ByteGrid out(height, width);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) out.at(r, c) = grid.at(r0 + r, c0 + c);
  return out;
}

Image center_crop(const Image& image, int height, int width) {
  require(height > 0 && width > 0 && height <= image.height && width <= image.width, ErrorKind::kInput,
          "center_crop: crop larger than the image");
  const int r0 = (image.height - height) / 2, c0 = (image.width - width) / 2;
  Image out(height, width, image.channels);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c)
      for (int ch = 0; ch < image.channels; ++ch) out.at(r, c, ch) = image.at(r0 + r, c0 + c, ch);
  return out;
}

EncoderInput assemble_input(const SemanticMask& mask, int n_labels, int resolution, int thickness) {
  require(mask.height() > 0 && mask.width() > 0, ErrorKind::kInput, "assemble_input: empty mask");
  require(resolution > 0, ErrorKind::kInput, "assemble_input: resolution must be positive");
  const OneHotMask native = one_hot(mask, n_labels);
  const ByteGrid contour = build_contour(native, thickness);
  const DistanceField distance = build_distance_field(contour);

  Image extra(mask.height(), mask.width(), 2);
  for (std::size_t i = 0; i < contour.data.size(); ++i) {
    extra.data[2 * i] = contour.data[i] / 255.0f;
    extra.data[2 * i + 1] = distance.values[i] / 255.0f;
  }
  const Image extra_r = resize_bilinear(extra, resolution, resolution);
  const ByteGrid labels_r = resize_nearest(mask.labels, resolution, resolution);

  EncoderInput out{n_labels + 2, resolution, resolution, {}};
  out.data.assign(static_cast<std::size_t>(resolution) * resolution * out.channels, 0.0f);
  for (std::size_t p = 0; p < labels_r.data.size(); ++p) {
    float* px = out.data.data() + p * out.channels;
    px[labels_r.data[p]] = 1.0f;
    px[n_labels] = std::clamp(extra_r.data[2 * p], 0.0f, 1.0f);
    px[n_labels + 1] = std::clamp(extra_r.data[2 * p + 1], 0.0f, 1.0f);
  }
  return out;
}

// ---- dataset files ----

std::string sample_name(int id) {
  require(id >= 0 && id <= 99999, ErrorKind::kInput, "sample id must lie in [0, 99999]");
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05d", id);
  return buf;
}

LabelTable read_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path.string());
  LabelTable table;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::istringstream ls(line);
    int id = -1;
    std::string name;
    ls >> id >> name;
    require(!ls.fail() && id == table.size(), ErrorKind::kData,
            path.filename().string() + ":" + std::to_string(line_no) + ": expected '" + std::to_string(table.size()) +
                " <name>'");
    table.names.push_back(name);
  }
  require(table.size() > 0, ErrorKind::kData, path.filename().string() + ": no labels");
  return table;
}

void write_labels(const std::filesystem::path& path, const LabelTable& table) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + path.string());
  for (int i = 0; i < table.size(); ++i) out << i << ' ' << table.names[i] << '\n';
}

namespace {

constexpr const char* kPoseFields[] = {"id", "yaw", "pitch", "roll", "fov", "distance"};

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ls(line);
  while (std::getline(ls, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    cells.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_number(const std::string& text, const std::string& context) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  require(ec == std::errc() && ptr == text.data() + text.size() && !text.empty(), ErrorKind::kData,
          context + ": '" + text + "' is not a number");
  return v;
}

}  // namespace

std::map<int, CameraPose> read_poses(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::kData, "poses.csv: missing header");
  const auto header = split_csv(line);
  std::map<std::string, std::size_t> column;
  for (std::size_t i = 0; i < header.size(); ++i) column[header[i]] = i;
  for (const char* field : kPoseFields) {
    require(column.count(field) == 1, ErrorKind::kData, std::string("poses.csv: missing column '") + field + "'");
  }
  std::map<int, CameraPose> poses;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv(line);
    const std::string where = "poses.csv:" + std::to_string(line_no);
    auto field = [&](const char* name) {
      const std::size_t c = column.at(name);
      require(c < cells.size() && !cells[c].empty(), ErrorKind::kData,
              where + ": record is missing field '" + std::string(name) + "'");
      return parse_number(cells[c], where + " field '" + name + "'");
    };
    const int id = static_cast<int>(field("id"));
    CameraPose p;
    p.yaw = field("yaw");
    p.pitch = field("pitch");
    p.roll = field("roll");
    p.fov_degrees = field("fov");
    p.distance = field("distance");
    try {
      p.validate();
    } catch (const Error& e) {
      fail(ErrorKind::kData, where + ": " + e.what());
    }
    require(poses.emplace(id, p).second, ErrorKind::kData, where + ": duplicate id " + std::to_string(id));
  }
  return poses;
}

void write_poses(const std::filesystem::path& path, const std::map<int, CameraPose>& poses) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + path.string());
  out << "id,yaw,pitch,roll,fov,distance\n";
  char buf[256];
  for (const auto& [id, p] : poses) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", id, p.yaw, p.pitch, p.roll, p.fov_degrees,
                  p.distance);
    out << buf;
  }
  require(static_cast<bool>(out), ErrorKind::kIo, "short write to " + path.string());
}

namespace {

Sample load_files(const std::filesystem::path& dir, int id, const LabelTable& labels, const CameraPose& pose,
                  const LoadOptions& options) {
  Sample s;
  s.id = id;
  s.pose = pose;
  s.mask.table = labels;
  s.mask.labels = read_png_gray(dir / "masks" / (sample_name(id) + ".png"));
  s.image = read_png_rgb(dir / "images" / (sample_name(id) + ".png"));
  require(s.image.height == s.mask.height() && s.image.width == s.mask.width(), ErrorKind::kData,
          "sample " + sample_name(id) + ": mask is " + std::to_string(s.mask.height()) + "x" +
              std::to_string(s.mask.width()) + " but image is " + std::to_string(s.image.height) + "x" +
              std::to_string(s.image.width));
  s.mask.validate();
  if (options.resize > 0) {
    s.mask.labels = resize_nearest(s.mask.labels, options.resize, options.resize);
    s.image = resize_bilinear(s.image, options.resize, options.resize);
  }
  if (options.crop > 0) {
    s.mask.labels = center_crop(s.mask.labels, options.crop, options.crop);
    s.image = center_crop(s.image, options.crop, options.crop);
  }
  return s;
}

}  // namespace

Sample load_sample(const std::filesystem::path& dir, int id, const LoadOptions& options) {
  return Dataset(dir).load(id, options);
}

void save_sample_files(const std::filesystem::path& dir, const Sample& sample) {
  std::filesystem::create_directories(dir / "masks");
  std::filesystem::create_directories(dir / "images");
  write_png(dir / "masks" / (sample_name(sample.id) + ".png"), sample.mask.labels);
  write_png(dir / "images" / (sample_name(sample.id) + ".png"), sample.image);
}

Dataset::Dataset(std::filesystem::path dir) : dir_(std::move(dir)) {
  require(std::filesystem::is_directory(dir_), ErrorKind::kIo, "dataset directory not found: " + dir_.string());
  labels_ = read_labels(dir_ / "labels.txt");
  poses_ = read_poses(dir_ / "poses.csv");
  for (const auto& [id, pose] : poses_) ids_.push_back(id);
}

const CameraPose& Dataset::pose(int id) const {
  const auto it = poses_.find(id);
  require(it != poses_.end(), ErrorKind::kData, "poses.csv: no pose record for sample " + sample_name(id));
  return it->second;
}

Sample Dataset::load(int id, const LoadOptions& options) const {
  return load_files(dir_, id, labels_, pose(id), options);
}

}  // namespace semnerf
