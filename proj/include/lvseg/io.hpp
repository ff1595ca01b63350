#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lvseg/core.hpp"

namespace lvseg {

// Binary netpbm graymap (P5), maxval 1..65535. Intensities map to [0,1].
Image read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Image& img, int maxval = 255);

// Masks are stored as {0, maxval}; anything else is rejected.
Mask read_mask_pgm(const std::filesystem::path& path);
void write_mask_pgm(const std::filesystem::path& path, const Mask& mask);

// Binary pixmap (P6), 8-bit RGB; `rgb` holds rows*cols*3 bytes.
void write_ppm(const std::filesystem::path& path, int rows, int cols, const std::vector<std::uint8_t>& rgb);

struct Dataset {
    std::vector<CineSequence> sequences;
    std::vector<MaskSequence> masks;
    DatasetSplit split;

    // Index of `subject_id` in `sequences`; throws when absent.
    std::size_t index_of(const std::string& subject_id) const;
};

// Manifest layout:
//   {"subjects":[{"id","twin_pair","spacing_mm":[sy,sx],"frames":[..],"masks":[..]}],
//    "split":{"train":[..],"validation":[..],"test":[..]}}
// Paths are relative to the manifest's directory. Without "split" the subjects
// are partitioned 70/15/15 by twin pair with make_split(.., 0).
Dataset load_dataset(const std::filesystem::path& manifest_path);

// Writes PGM files under `dir` plus dir/manifest.json.
void write_dataset(const std::filesystem::path& dir, const Dataset& data);

// Partitions subjects into 70/15/15 groups without separating twin pairs.
DatasetSplit make_split(const std::vector<std::string>& subject_ids,
                        const std::map<std::string, std::string>& twin_pair, unsigned long long seed);

// Raw little-endian float64 planes, preceded by an 8-byte header length and a
// JSON header {"shape":[..],"dtype":"<f8", ...extra}.
void write_planes(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
                  const std::vector<double>& values, const std::string& extra_json = "{}");
std::vector<double> read_planes(const std::filesystem::path& path, std::vector<std::size_t>* shape = nullptr);

ProbSequence read_probs(const std::filesystem::path& path);
void write_probs(const std::filesystem::path& path, const ProbSequence& probs);

}  // namespace lvseg
