#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace epng {

// ---- run-length mask codec -------------------------------------------------
// Alternating run lengths over a row-major binary sequence; the first run
// counts zeros and may be 0.

std::vector<std::int64_t> rle_encode(std::span<const std::uint8_t> mask);
std::vector<std::uint8_t> rle_decode(std::span<const std::int64_t> runs, std::size_t length);

// ---- netpbm ------------------------------------------------------------

struct PpmImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // H*W*3
};

void write_ppm(const std::filesystem::path& path, const PpmImage& image);
PpmImage read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, int width, int height,
               std::span<const std::uint8_t> gray);

// ---- samples -----------------------------------------------------------

struct PhraseAnnotation {
  int span_begin = 0;
  int span_end = 0;  // [begin, end) into the narrative tokens
  std::vector<std::int64_t> rle;
  bool is_thing = false;
  bool is_plural = false;

  bool operator==(const PhraseAnnotation&) const = default;
};

struct GroundingSample {
  int height = 0;
  int width = 0;
  std::vector<double> image;  // H*W*3 row-major, values in [0,1]
  std::vector<std::string> tokens;
  std::vector<PhraseAnnotation> phrases;

  bool operator==(const GroundingSample&) const = default;
};

std::vector<std::uint8_t> decode_mask(const PhraseAnnotation& phrase, int height, int width);

// Fixed 64-word token list shipped with the repo.
std::span<const std::string_view> vocabulary();
/// Index into vocabulary(), or -1 if unknown.
int token_id(std::string_view word);
/// Maps every narrative token; raises io_error naming any unknown token.
std::vector<int> token_ids(const std::vector<std::string>& tokens);

// ---- synthetic generator -------------------------------------------------
// Colored geometric shapes on a textured background, annotated with a
// many-to-many phrase structure: per-shape singular phrases, a stuff phrase
// covering the background, a plural phrase unioning all disks, and a second
// phrase for the first disk so one region carries two distinct phrases.
// Every sample contains at least two disks so the plural mask is nonempty.
// Pure function of (seed, config).

struct GenConfig {
  int image_size = 64;  // multiple of 32, >= 32
  int n_samples = 20;
  int max_shapes = 2;   // above 2 adds free-placed shapes with finer masks
};

std::vector<GroundingSample> generate_synthetic(std::uint64_t seed, const GenConfig& config);

// ---- dataset directory -------------------------------------------------
// Layout: images/NNNNNN.ppm plus one annotations.jsonl; record order defines
// sample indices.

void save_dataset(std::span<const GroundingSample> samples, const std::filesystem::path& dir);
std::vector<GroundingSample> load_dataset(const std::filesystem::path& dir);

}  // namespace epng
