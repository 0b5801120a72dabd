#include "epng/dataio.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "epng/errors.hpp"
#include "epng/rng.hpp"

namespace epng {

using nlohmann::json;

// ---- RLE -----------------------------------------------------------------

std::vector<std::int64_t> rle_encode(std::span<const std::uint8_t> mask) {
  for (std::uint8_t v : mask) {
    if (v != 0 && v != 1) {
      throw std::invalid_argument("rle_encode: non-binary value " + std::to_string(int(v)));
    }
  }
  std::vector<std::int64_t> runs;
  std::uint8_t current = 0;
  std::int64_t run = 0;
  for (std::uint8_t v : mask) {
    if (v == current) {
      ++run;
    } else {
      runs.push_back(run);
      current = v;
      run = 1;
    }
  }
  runs.push_back(run);
  return runs;
}

std::vector<std::uint8_t> rle_decode(std::span<const std::int64_t> runs, std::size_t length) {
  std::int64_t total = 0;
  for (std::int64_t r : runs) {
    if (r < 0) throw std::invalid_argument("rle_decode: negative run " + std::to_string(r));
    total += r;
  }
  if (total != static_cast<std::int64_t>(length)) {
    throw std::invalid_argument("rle_decode: runs sum to " + std::to_string(total) +
                                ", expected " + std::to_string(length));
  }
  std::vector<std::uint8_t> out;
  out.reserve(length);
  std::uint8_t current = 0;
  for (std::int64_t r : runs) {
    out.insert(out.end(), static_cast<std::size_t>(r), current);
    current = current ? 0 : 1;
  }
  return out;
}

// ---- netpbm ----------------------------------------------------------------

void write_ppm(const std::filesystem::path& path, const PpmImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write image: " + path.string());
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.rgb.data()),
            static_cast<std::streamsize>(image.rgb.size()));
  if (!out) throw io_error("short write on image: " + path.string());
}

namespace {

int read_pnm_int(std::istream& in, const std::filesystem::path& path) {
  // Skips whitespace and '#' comment lines between header fields.
  while (true) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int v = -1;
  in >> v;
  if (!in || v < 0) throw io_error("bad netpbm header in " + path.string());
  return v;
}

}  // namespace

PpmImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open image: " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6") throw io_error("not a P6 image: " + path.string());
  PpmImage img;
  img.width = read_pnm_int(in, path);
  img.height = read_pnm_int(in, path);
  const int maxval = read_pnm_int(in, path);
  if (maxval != 255) throw io_error("unsupported maxval in " + path.string());
  in.get();  // single whitespace after header
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (!in) throw io_error("truncated image data in " + path.string());
  return img;
}

void write_pgm(const std::filesystem::path& path, int width, int height,
               std::span<const std::uint8_t> gray) {
  if (gray.size() != static_cast<std::size_t>(width) * height) {
    throw std::invalid_argument("write_pgm: " + std::to_string(gray.size()) + " bytes for " +
                                std::to_string(width) + "x" + std::to_string(height));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write image: " + path.string());
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
  if (!out) throw io_error("short write on image: " + path.string());
}

// ---- vocabulary ------------------------------------------------------------

namespace {

constexpr std::array<std::string_view, 64> kVocabulary = {
    // colors
    "red", "green", "blue", "yellow", "purple", "orange", "cyan", "magenta",
    // shape kinds
    "disk", "rectangle", "triangle", "disks", "rectangles", "triangles",
    // scene nouns
    "background", "object", "objects", "thing", "things", "shape", "shapes",
    "region", "regions", "scene",
    // texture
    "textured", "plain", "dark", "light", "bright", "pale",
    // function words
    "a", "an", "the", "and", "or", "with", "on", "in", "of", "at", "by", "to",
    // verbs
    "is", "are", "has", "contains", "shows", "appears", "sits", "lies",
    // positions
    "left", "right", "top", "bottom", "center", "corner", "middle", "near",
    // size and form
    "small", "large", "big", "tiny", "round", "flat",
};

}  // namespace

std::span<const std::string_view> vocabulary() { return kVocabulary; }

int token_id(std::string_view word) {
  for (std::size_t i = 0; i < kVocabulary.size(); ++i) {
    if (kVocabulary[i] == word) return static_cast<int>(i);
  }
  return -1;
}

std::vector<int> token_ids(const std::vector<std::string>& tokens) {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const std::string& t : tokens) {
    const int id = token_id(t);
    if (id < 0) throw io_error("token not in vocabulary: '" + t + "'");
    ids.push_back(id);
  }
  return ids;
}

std::vector<std::uint8_t> decode_mask(const PhraseAnnotation& phrase, int height, int width) {
  return rle_decode(phrase.rle, static_cast<std::size_t>(height) * width);
}

// ---- synthetic generator -----------------------------------------------------

namespace {

struct PlacedShape {
  int kind = 0;  // 0 disk, 1 rectangle, 2 triangle
  int color = 0;
  double cx = 0, cy = 0, r = 0;
  double rw = 0, rh = 0;               // rectangle half extents
  std::array<double, 6> verts{};      // triangle x0,y0,x1,y1,x2,y2
  std::vector<std::uint8_t> mask;
};

constexpr std::array<std::array<int, 3>, 8> kPalette = {{
    {210, 45, 40},    // red
    {60, 170, 70},    // green
    {50, 90, 210},    // blue
    {230, 200, 50},   // yellow
    {150, 60, 190},   // purple
    {235, 140, 40},   // orange
    {60, 200, 210},   // cyan
    {220, 70, 180},   // magenta
}};

constexpr std::array<std::string_view, 3> kKindWord = {"disk", "rectangle", "triangle"};

void rasterize(PlacedShape& s, int size) {
  s.mask.assign(static_cast<std::size_t>(size) * size, 0);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      bool inside = false;
      const double px = x + 0.5, py = y + 0.5;
      if (s.kind == 0) {
        inside = (px - s.cx) * (px - s.cx) + (py - s.cy) * (py - s.cy) <= s.r * s.r;
      } else if (s.kind == 1) {
        inside = std::abs(px - s.cx) <= s.rw && std::abs(py - s.cy) <= s.rh;
      } else {
        const double x0 = s.verts[0], y0 = s.verts[1];
        const double x1 = s.verts[2], y1 = s.verts[3];
        const double x2 = s.verts[4], y2 = s.verts[5];
        const double d0 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
        const double d1 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
        const double d2 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2);
        inside = (d0 >= 0 && d1 >= 0 && d2 >= 0) || (d0 <= 0 && d1 <= 0 && d2 <= 0);
      }
      if (inside) s.mask[static_cast<std::size_t>(y) * size + x] = 1;
    }
  }
}

GroundingSample make_sample(std::uint64_t sample_seed, const GenConfig& config) {
  Rng rng(sample_seed);
  const int size = config.image_size;
  const double s = size;

  const int max_shapes = std::clamp(config.max_shapes, 2, 8);
  const int n_extras = rng.below(max_shapes - 1);  // beyond the two rectangles

  std::vector<int> colors(kPalette.size());
  for (std::size_t i = 0; i < colors.size(); ++i) colors[i] = static_cast<int>(i);
  rng.shuffle(colors);

  // The two guaranteed shapes are full-span orthogonal rectangles whose edges
  // are aligned to the stride-4 prediction grid (units of size/16), so their
  // masks sit well inside what the dense head can express at this scale.
  std::vector<PlacedShape> shapes;
  const int unit = size / 16;
  {
    PlacedShape vert;
    vert.kind = 1;
    vert.color = colors[0];
    const int w_units = 5 + rng.below(4);           // 5..8 sixteenths wide
    const int x_units = 2 + rng.below(13 - w_units);  // edges inside [2, 14]
    vert.rw = 0.5 * w_units * unit;
    vert.rh = 0.5 * s;
    vert.cx = (x_units + 0.5 * w_units) * unit;
    vert.cy = 0.5 * s;
    rasterize(vert, size);
    shapes.push_back(std::move(vert));

    PlacedShape horiz;
    horiz.kind = 1;
    horiz.color = colors[1];
    const int h_units = 5 + rng.below(4);
    const int y_units = 2 + rng.below(13 - h_units);
    horiz.rw = 0.5 * s;
    horiz.rh = 0.5 * h_units * unit;
    horiz.cx = 0.5 * s;
    horiz.cy = (y_units + 0.5 * h_units) * unit;
    rasterize(horiz, size);
    shapes.push_back(std::move(horiz));
  }

  // Optional extra shapes (any kind, free placement, drawn on top). They make
  // the task richer at the cost of finer masks than the head can trace.
  for (int i = 0; i < n_extras; ++i) {
    PlacedShape shape;
    shape.kind = rng.below(3);
    shape.color = colors[static_cast<std::size_t>(2 + i)];
    shape.r = rng.uniform(0.10, 0.16) * s;
    shape.cx = rng.uniform(shape.r + 2.0, s - shape.r - 2.0);
    shape.cy = rng.uniform(shape.r + 2.0, s - shape.r - 2.0);
    if (shape.kind == 1) {
      shape.rw = shape.r * rng.uniform(0.75, 1.0);
      shape.rh = shape.r * rng.uniform(0.75, 1.0);
    } else if (shape.kind == 2) {
      const double rot = rng.uniform(0.0, 6.283185307179586);
      for (int v = 0; v < 3; ++v) {
        const double ang = rot + v * 2.0943951023931953;  // 120 degrees
        const double rr = shape.r * rng.uniform(0.95, 1.2);
        shape.verts[static_cast<std::size_t>(2 * v)] = shape.cx + rr * std::cos(ang);
        shape.verts[static_cast<std::size_t>(2 * v + 1)] = shape.cy + rr * std::sin(ang);
      }
    }
    rasterize(shape, size);
    shapes.push_back(std::move(shape));
  }

  // Textured background: a coarse gray lattice interpolated up, mild noise.
  GroundingSample out;
  out.height = size;
  out.width = size;
  constexpr int kLattice = 5;
  std::array<double, kLattice * kLattice> lattice{};
  for (double& v : lattice) v = rng.uniform(90.0, 140.0);
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(size) * size * 3);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double gy = static_cast<double>(y) / size * (kLattice - 1);
      const double gx = static_cast<double>(x) / size * (kLattice - 1);
      const int y0 = static_cast<int>(gy), x0 = static_cast<int>(gx);
      const int y1 = std::min(y0 + 1, kLattice - 1), x1 = std::min(x0 + 1, kLattice - 1);
      const double ty = gy - y0, tx = gx - x0;
      const double base = (1 - ty) * ((1 - tx) * lattice[static_cast<std::size_t>(y0) * kLattice + x0] +
                                      tx * lattice[static_cast<std::size_t>(y0) * kLattice + x1]) +
                          ty * ((1 - tx) * lattice[static_cast<std::size_t>(y1) * kLattice + x0] +
                                tx * lattice[static_cast<std::size_t>(y1) * kLattice + x1]);
      const double noise = rng.uniform(-6.0, 6.0);
      const std::size_t p = (static_cast<std::size_t>(y) * size + x) * 3;
      rgb[p + 0] = static_cast<std::uint8_t>(std::clamp(base + noise, 0.0, 255.0));
      rgb[p + 1] = static_cast<std::uint8_t>(std::clamp(base * 0.97 + noise, 0.0, 255.0));
      rgb[p + 2] = static_cast<std::uint8_t>(std::clamp(base * 1.04 + noise, 0.0, 255.0));
    }
  }
  for (const PlacedShape& shape : shapes) {
    const auto& color = kPalette[static_cast<std::size_t>(shape.color)];
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        if (!shape.mask[static_cast<std::size_t>(y) * size + x]) continue;
        const double jitter = rng.uniform(-6.0, 6.0);
        const std::size_t p = (static_cast<std::size_t>(y) * size + x) * 3;
        for (int c = 0; c < 3; ++c) {
          rgb[p + c] = static_cast<std::uint8_t>(std::clamp(color[static_cast<std::size_t>(c)] + jitter, 0.0, 255.0));
        }
      }
    }
  }
  out.image.resize(rgb.size());
  for (std::size_t i = 0; i < rgb.size(); ++i) out.image[i] = rgb[i] / 255.0;

  // Narrative: "a <color> <kind>" per shape, the background, one plural
  // phrase per kind with at least two instances (the union of those masks),
  // and a second phrase for the first rectangle so one region carries two
  // distinct phrases.
  auto push = [&](std::string_view w) {
    out.tokens.emplace_back(w);
    return static_cast<int>(out.tokens.size()) - 1;
  };
  std::vector<std::uint8_t> foreground(static_cast<std::size_t>(size) * size, 0);
  std::array<std::vector<std::uint8_t>, 3> kind_union;
  std::array<int, 3> kind_count{};
  for (auto& u : kind_union) u.assign(foreground.size(), 0);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const PlacedShape& shape = shapes[i];
    push("a");
    const int begin = push(kVocabulary[static_cast<std::size_t>(shape.color)]);
    push(kKindWord[static_cast<std::size_t>(shape.kind)]);
    if (i + 1 < shapes.size()) push("and");
    PhraseAnnotation ann;
    ann.span_begin = begin;
    ann.span_end = begin + 2;
    ann.rle = rle_encode(shape.mask);
    ann.is_thing = true;
    ann.is_plural = false;
    out.phrases.push_back(std::move(ann));
    ++kind_count[static_cast<std::size_t>(shape.kind)];
    for (std::size_t p = 0; p < foreground.size(); ++p) {
      foreground[p] |= shape.mask[p];
      kind_union[static_cast<std::size_t>(shape.kind)][p] |= shape.mask[p];
    }
  }
  push("on");
  push("textured");
  const int bg_pos = push("background");
  std::vector<std::uint8_t> background(foreground.size());
  for (std::size_t p = 0; p < foreground.size(); ++p) background[p] = foreground[p] ? 0 : 1;
  PhraseAnnotation bg;
  bg.span_begin = bg_pos;
  bg.span_end = bg_pos + 1;
  bg.rle = rle_encode(background);
  bg.is_thing = false;
  bg.is_plural = false;
  out.phrases.push_back(std::move(bg));

  constexpr std::array<std::string_view, 3> kPluralWord = {"disks", "rectangles", "triangles"};
  for (int kind = 0; kind < 3; ++kind) {
    if (kind_count[static_cast<std::size_t>(kind)] < 2) continue;
    push("the");
    const int plural_pos = push(kPluralWord[static_cast<std::size_t>(kind)]);
    PhraseAnnotation plural;
    plural.span_begin = plural_pos;
    plural.span_end = plural_pos + 1;
    plural.rle = rle_encode(kind_union[static_cast<std::size_t>(kind)]);
    plural.is_thing = true;
    plural.is_plural = true;
    out.phrases.push_back(std::move(plural));
  }

  push("the");
  const int syn_pos = push(kVocabulary[static_cast<std::size_t>(shapes[0].color)]);
  push("object");
  PhraseAnnotation synonym;
  synonym.span_begin = syn_pos;
  synonym.span_end = syn_pos + 2;
  synonym.rle = out.phrases[0].rle;  // same region, different phrase
  synonym.is_thing = true;
  synonym.is_plural = false;
  out.phrases.push_back(std::move(synonym));

  return out;
}

}  // namespace

std::vector<GroundingSample> generate_synthetic(std::uint64_t seed, const GenConfig& config) {
  if (config.image_size < 32 || config.image_size % 32 != 0) {
    throw std::invalid_argument("generate_synthetic: image_size " +
                                std::to_string(config.image_size) + " is not a multiple of 32");
  }
  std::vector<GroundingSample> samples;
  samples.reserve(static_cast<std::size_t>(config.n_samples));
  for (int i = 0; i < config.n_samples; ++i) {
    samples.push_back(make_sample(mix_seed(seed, static_cast<std::uint64_t>(i)), config));
  }
  return samples;
}

// ---- dataset directory -------------------------------------------------------

namespace {

std::string image_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "images/%06zu.ppm", index);
  return buf;
}

}  // namespace

void save_dataset(std::span<const GroundingSample> samples, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw io_error("cannot create dataset directory: " + (dir / "images").string());
  std::ofstream ann(dir / "annotations.jsonl", std::ios::binary);
  if (!ann) throw io_error("cannot write annotations: " + (dir / "annotations.jsonl").string());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const GroundingSample& s = samples[i];
    PpmImage img;
    img.width = s.width;
    img.height = s.height;
    img.rgb.resize(s.image.size());
    for (std::size_t p = 0; p < s.image.size(); ++p) {
      img.rgb[p] = static_cast<std::uint8_t>(std::lround(std::clamp(s.image[p], 0.0, 1.0) * 255.0));
    }
    const std::string name = image_name(i);
    write_ppm(dir / name, img);

    json phrases = json::array();
    for (const PhraseAnnotation& p : s.phrases) {
      phrases.push_back(json{{"span", {p.span_begin, p.span_end}},
                             {"rle", p.rle},
                             {"thing", p.is_thing},
                             {"plural", p.is_plural}});
    }
    json record = {{"image", name}, {"tokens", s.tokens}, {"phrases", phrases}};
    ann << record.dump() << "\n";
  }
  if (!ann) throw io_error("short write on annotations in " + dir.string());
}

std::vector<GroundingSample> load_dataset(const std::filesystem::path& dir) {
  const std::filesystem::path ann_path = dir / "annotations.jsonl";
  std::ifstream ann(ann_path, std::ios::binary);
  if (!ann) throw io_error("cannot open annotations: " + ann_path.string());

  std::size_t image_files = 0;
  const std::filesystem::path images_dir = dir / "images";
  if (std::filesystem::exists(images_dir)) {
    for (const auto& entry : std::filesystem::directory_iterator(images_dir)) {
      if (entry.path().extension() == ".ppm") ++image_files;
    }
  }

  std::vector<GroundingSample> samples;
  std::string line;
  std::size_t record = 0;
  while (std::getline(ann, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw io_error("malformed annotation line in " + ann_path.string() + ", record " +
                     std::to_string(record) + ": " + e.what());
    }
    GroundingSample s;
    try {
      const std::string image_rel = j.at("image").get<std::string>();
      const std::filesystem::path image_path = dir / image_rel;
      if (!std::filesystem::exists(image_path)) {
        throw io_error("missing image file " + image_path.string() + " (record " +
                       std::to_string(record) + ")");
      }
      PpmImage img = read_ppm(image_path);
      s.width = img.width;
      s.height = img.height;
      s.image.resize(img.rgb.size());
      for (std::size_t p = 0; p < img.rgb.size(); ++p) s.image[p] = img.rgb[p] / 255.0;
      s.tokens = j.at("tokens").get<std::vector<std::string>>();
      for (const json& pj : j.at("phrases")) {
        PhraseAnnotation p;
        p.span_begin = pj.at("span").at(0).get<int>();
        p.span_end = pj.at("span").at(1).get<int>();
        p.rle = pj.at("rle").get<std::vector<std::int64_t>>();
        p.is_thing = pj.at("thing").get<bool>();
        p.is_plural = pj.at("plural").get<bool>();
        if (p.span_begin < 0 || p.span_end <= p.span_begin ||
            p.span_end > static_cast<int>(s.tokens.size())) {
          throw io_error("phrase span out of range in " + ann_path.string() + ", record " +
                         std::to_string(record));
        }
        std::int64_t total = 0;
        for (std::int64_t r : p.rle) total += r;
        if (total != static_cast<std::int64_t>(s.height) * s.width) {
          throw io_error("RLE length mismatch in " + ann_path.string() + ", record " +
                         std::to_string(record) + ": runs sum to " + std::to_string(total) +
                         " for a " + std::to_string(s.width) + "x" + std::to_string(s.height) +
                         " image");
        }
        s.phrases.push_back(std::move(p));
      }
    } catch (const json::exception& e) {
      throw io_error("malformed annotation line in " + ann_path.string() + ", record " +
                     std::to_string(record) + ": " + e.what());
    }
    samples.push_back(std::move(s));
    ++record;
  }
  if (image_files != samples.size()) {
    throw io_error("image/annotation count mismatch in " + dir.string() + ": " +
                   std::to_string(image_files) + " images, " + std::to_string(samples.size()) +
                   " records");
  }
  return samples;
}

}  // namespace epng
