#pragma once

// Synthetic dataset generation, stratified train/val/test splitting, K-shot
// subsampling, and the on-disk dataset layout (manifest JSONL + raw f32
// image tensors or P6 PPM).

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "maple/autograd.hpp"
#include "maple/hierarchy.hpp"
#include "maple/rng.hpp"

namespace maple {

struct Sample {
  std::string id;
  std::vector<float> image;  // [C,S,S] row-major
  LabelVector labels;        // 0/1 over all hierarchy nodes
};

struct Dataset {
  int channels = 3;
  int image_size = 32;
  std::vector<Sample> samples;

  size_t size() const { return samples.size(); }
};

// Each leaf owns a fixed random texture tile and a fixed grid slot; a sample
// draws 1-3 leaves, stamps their tiles (with per-sample +-1 pixel jitter)
// onto a blank canvas and adds Gaussian noise. Labels are the upward
// closure of the drawn leaves. The first |leaves| samples each force one
// distinct leaf so every class is represented.
Dataset synth_dataset(const LabelHierarchy& h, int n, std::uint64_t seed,
                      double noise, int image_size = 32, int channels = 3);

// Texture tile geometry, shared with the template-matching oracle in tests.
constexpr int kTextureSide = 6;
constexpr int kSlotStride = 6;
int slot_grid_side(int image_size);
std::pair<int, int> leaf_slot(int leaf_index, int image_size);
std::vector<float> leaf_texture(const LabelHierarchy& h, int leaf_index,
                                std::uint64_t seed, int channels);

enum class SplitStrategy { iterative_stratified, random };

struct SplitSpec {
  double train = 0.72;
  double val = 0.08;
  double test = 0.2;
  SplitStrategy strategy = SplitStrategy::iterative_stratified;
  std::uint64_t seed = 0;
};

struct SplitResult {
  Dataset train, val, test;
  std::vector<std::string> warnings;  // e.g. a label missing from train
};

// Iterative stratification: walk labels from rarest to most common and deal
// each label's remaining samples to the fold that most wants that label.
SplitResult split(const Dataset& ds, const LabelHierarchy& h,
                  const SplitSpec& spec);

// Per leaf, min(K, available) samples containing that leaf, drawn without
// replacement; the union is deduplicated. Each K resamples independently,
// so subsets for growing K are not nested.
Dataset kshot_sample(const Dataset& train, const LabelHierarchy& h, int k,
                     std::uint64_t seed);

// Positive-sample count per leaf id.
std::map<int, std::int64_t> leaf_counts(const Dataset& ds,
                                        const LabelHierarchy& h);

// Directory layout: hierarchy.yaml, meta.json, manifest.jsonl and
// images/<id>.f32t (or .ppm). Manifest rows are {id, image, labels} with
// labels as node names.
void save_dataset(const std::string& dir, const Dataset& ds,
                  const LabelHierarchy& h, bool as_ppm = false);
Dataset load_dataset(const std::string& dir, const LabelHierarchy& h);
LabelHierarchy load_dataset_hierarchy(const std::string& dir);

// Raw image tensor file: 16-byte header (magic "F32T", u32 rank, u16
// dims[4], unused dims zero) followed by little-endian f32 values.
void write_f32t(const std::string& path, const std::vector<float>& data,
                const std::vector<int>& dims);
std::vector<float> read_f32t(const std::string& path, std::vector<int>& dims);

// 8-bit RGB P6; values are clamped to [0,1] on write and mapped back on
// read, so the round trip quantizes.
void write_ppm(const std::string& path, const Sample& s, int channels,
               int image_size);
std::vector<float> read_ppm(const std::string& path, int& channels,
                            int& image_size);

// Batch assembly for the model: images as a [B,C,S,S] constant, targets as
// a [B,|V|] 0/1 matrix.
template <class S>
Tensor<S> batch_images(const Dataset& ds, const std::vector<int>& idx) {
  if (idx.empty()) throw ValueError("empty batch");
  Eigen::Index c = ds.channels, s = ds.image_size;
  Eigen::Index b = static_cast<Eigen::Index>(idx.size());
  Mat<S> m(b * c * s, s);
  for (Eigen::Index i = 0; i < b; ++i) {
    const Sample& smp = ds.samples[static_cast<size_t>(idx[i])];
    for (Eigen::Index j = 0; j < c * s; ++j) {
      for (Eigen::Index x = 0; x < s; ++x) {
        m(i * c * s + j, x) =
            static_cast<S>(smp.image[static_cast<size_t>(j * s + x)]);
      }
    }
  }
  return Tensor<S>::constant({b, c, s, s}, std::move(m));
}

template <class S>
Mat<S> batch_targets(const Dataset& ds, const std::vector<int>& idx,
                     Eigen::Index num_nodes) {
  Mat<S> t = Mat<S>::Zero(static_cast<Eigen::Index>(idx.size()), num_nodes);
  for (size_t i = 0; i < idx.size(); ++i) {
    const LabelVector& lv = ds.samples[static_cast<size_t>(idx[i])].labels;
    if (static_cast<Eigen::Index>(lv.size()) != num_nodes) {
      throw ShapeError("sample '" + ds.samples[static_cast<size_t>(idx[i])].id +
                       "' labels cover " + std::to_string(lv.size()) +
                       " nodes, expected " + std::to_string(num_nodes));
    }
    for (Eigen::Index j = 0; j < num_nodes; ++j) {
      t(static_cast<Eigen::Index>(i), j) =
          static_cast<S>(lv[static_cast<size_t>(j)]);
    }
  }
  return t;
}

}  // namespace maple
