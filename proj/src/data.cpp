#include "maple/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "maple/errors.hpp"

namespace fs = std::filesystem;

namespace maple {

int slot_grid_side(int image_size) {
  // Tiles sit at x = 1 + stride*k and may jitter one pixel either way, so
  // the last slot needs 1 + stride*k + kTextureSide + 1 <= image_size.
  return (image_size - kTextureSide - 2) / kSlotStride + 1;
}

std::pair<int, int> leaf_slot(int leaf_index, int image_size) {
  int g = slot_grid_side(image_size);
  return {1 + kSlotStride * (leaf_index % g),
          1 + kSlotStride * (leaf_index / g)};
}

std::vector<float> leaf_texture(const LabelHierarchy& h, int leaf_index,
                                std::uint64_t seed, int channels) {
  // All tiles come from one stream in leaf order, so tile k is a pure
  // function of (seed, k) regardless of which samples get generated.
  Rng rng = seeded_stream(seed, 0x7e87);
  size_t per = static_cast<size_t>(channels) * kTextureSide * kTextureSide;
  std::vector<float> tex(per);
  for (size_t i = 0; i < h.leaf_ids().size(); ++i) {
    for (size_t j = 0; j < per; ++j) {
      float v = static_cast<float>(rng.uniform());
      if (static_cast<int>(i) == leaf_index) tex[j] = v;
    }
    if (static_cast<int>(i) == leaf_index) return tex;
  }
  throw ValueError("leaf index " + std::to_string(leaf_index) +
                   " out of range");
}

Dataset synth_dataset(const LabelHierarchy& h, int n, std::uint64_t seed,
                      double noise, int image_size, int channels) {
  const std::vector<int>& leaves = h.leaf_ids();
  int num_leaves = static_cast<int>(leaves.size());
  if (n < num_leaves) {
    throw ValueError("need at least " + std::to_string(num_leaves) +
                     " samples to cover every leaf, got " + std::to_string(n));
  }
  int g = slot_grid_side(image_size);
  if (num_leaves > g * g) {
    throw ValueError("image size " + std::to_string(image_size) +
                     " offers " + std::to_string(g * g) + " texture slots for " +
                     std::to_string(num_leaves) + " leaves");
  }
  if (noise < 0) throw ValueError("noise amplitude must be non-negative");

  // Fixed per-leaf tiles, then per-sample draws from an independent stream.
  size_t per = static_cast<size_t>(channels) * kTextureSide * kTextureSide;
  std::vector<std::vector<float>> tex(static_cast<size_t>(num_leaves));
  {
    Rng trng = seeded_stream(seed, 0x7e87);
    for (auto& t : tex) {
      t.resize(per);
      for (auto& v : t) v = static_cast<float>(trng.uniform());
    }
  }

  Rng rng = seeded_stream(seed, 0x5a31);
  Dataset ds;
  ds.channels = channels;
  ds.image_size = image_size;
  size_t plane = static_cast<size_t>(image_size) * image_size;
  for (int i = 0; i < n; ++i) {
    int want = 1 + static_cast<int>(rng.below(
                       static_cast<std::uint64_t>(std::min(3, num_leaves))));
    std::set<int> chosen;
    if (i < num_leaves) chosen.insert(i);
    while (static_cast<int>(chosen.size()) < want) {
      chosen.insert(static_cast<int>(rng.below(
          static_cast<std::uint64_t>(num_leaves))));
    }

    Sample s;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s%06d", i);
    s.id = buf;
    s.labels.assign(h.size(), 0);
    for (int k : chosen) {
      s.labels[static_cast<size_t>(leaves[static_cast<size_t>(k)])] = 1;
    }
    s.labels = h.close_upward(s.labels);

    s.image.assign(static_cast<size_t>(channels) * plane, 0.0f);
    for (int k : chosen) {  // ascending, so overlaps resolve the same way
      auto [x0, y0] = leaf_slot(k, image_size);
      int dx = static_cast<int>(rng.below(3)) - 1;
      int dy = static_cast<int>(rng.below(3)) - 1;
      for (int c = 0; c < channels; ++c) {
        for (int y = 0; y < kTextureSide; ++y) {
          for (int x = 0; x < kTextureSide; ++x) {
            size_t at = static_cast<size_t>(c) * plane +
                        static_cast<size_t>(y0 + dy + y) * image_size +
                        static_cast<size_t>(x0 + dx + x);
            s.image[at] = tex[static_cast<size_t>(k)]
                             [static_cast<size_t>(
                                  (c * kTextureSide + y) * kTextureSide + x)];
          }
        }
      }
    }
    if (noise > 0) {
      for (auto& v : s.image) {
        v += static_cast<float>(noise * rng.normal());
      }
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

namespace {

Dataset take(const Dataset& ds, std::vector<int> idx) {
  std::sort(idx.begin(), idx.end());
  Dataset out;
  out.channels = ds.channels;
  out.image_size = ds.image_size;
  for (int i : idx) out.samples.push_back(ds.samples[static_cast<size_t>(i)]);
  return out;
}

}  // namespace

SplitResult split(const Dataset& ds, const LabelHierarchy& h,
                  const SplitSpec& spec) {
  if (ds.samples.empty()) throw ValueError("cannot split an empty dataset");
  double sum = spec.train + spec.val + spec.test;
  if (std::abs(sum - 1.0) > 1e-9 || spec.train < 0 || spec.val < 0 ||
      spec.test < 0) {
    throw ValidationError("split fractions must be non-negative and sum to 1");
  }
  int n = static_cast<int>(ds.samples.size());
  Rng rng = seeded_stream(spec.seed, 0x59117);
  std::array<std::vector<int>, 3> folds;
  double frac[3] = {spec.train, spec.val, spec.test};

  if (spec.strategy == SplitStrategy::random) {
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int i = n - 1; i > 0; --i) {
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(rng.below(
                    static_cast<std::uint64_t>(i + 1)))]);
    }
    int cut1 = static_cast<int>(std::lround(n * frac[0]));
    int cut2 = cut1 + static_cast<int>(std::lround(n * frac[1]));
    cut2 = std::min(cut2, n);
    for (int i = 0; i < n; ++i) {
      folds[i < cut1 ? 0 : (i < cut2 ? 1 : 2)].push_back(
          order[static_cast<size_t>(i)]);
    }
  } else {
    // Iterative stratification: repeatedly take the label with the fewest
    // unassigned positives and deal its samples to the fold whose remaining
    // demand for that label is largest.
    const std::vector<int>& leaves = h.leaf_ids();
    size_t nl = leaves.size();
    std::vector<bool> assigned(static_cast<size_t>(n), false);
    std::vector<double> want_total(3);
    std::vector<std::vector<double>> want_label(3,
                                                std::vector<double>(nl, 0.0));
    for (int f = 0; f < 3; ++f) want_total[static_cast<size_t>(f)] = n * frac[f];
    for (size_t l = 0; l < nl; ++l) {
      int c = 0;
      for (const Sample& s : ds.samples) {
        c += s.labels[static_cast<size_t>(leaves[l])];
      }
      for (int f = 0; f < 3; ++f) {
        want_label[static_cast<size_t>(f)][l] = c * frac[f];
      }
    }
    auto leaf_remaining = [&](size_t l) {
      int c = 0;
      for (int i = 0; i < n; ++i) {
        if (!assigned[static_cast<size_t>(i)] &&
            ds.samples[static_cast<size_t>(i)]
                .labels[static_cast<size_t>(leaves[l])]) {
          ++c;
        }
      }
      return c;
    };
    auto place = [&](int i, int f) {
      assigned[static_cast<size_t>(i)] = true;
      folds[static_cast<size_t>(f)].push_back(i);
      want_total[static_cast<size_t>(f)] -= 1.0;
      for (size_t l = 0; l < nl; ++l) {
        if (ds.samples[static_cast<size_t>(i)]
                .labels[static_cast<size_t>(leaves[l])]) {
          want_label[static_cast<size_t>(f)][l] -= 1.0;
        }
      }
    };
    int left = n;
    while (left > 0) {
      int best_l = -1, best_c = 0;
      for (size_t l = 0; l < nl; ++l) {
        int c = leaf_remaining(l);
        if (c > 0 && (best_l < 0 || c < best_c)) {
          best_l = static_cast<int>(l);
          best_c = c;
        }
      }
      if (best_l < 0) {
        // Leftovers carry no leaf labels; deal them by total demand.
        for (int i = 0; i < n; ++i) {
          if (assigned[static_cast<size_t>(i)]) continue;
          int f = 0;
          for (int j = 1; j < 3; ++j) {
            if (want_total[static_cast<size_t>(j)] >
                want_total[static_cast<size_t>(f)]) {
              f = j;
            }
          }
          place(i, f);
          --left;
        }
        break;
      }
      for (int i = 0; i < n; ++i) {
        if (assigned[static_cast<size_t>(i)] ||
            !ds.samples[static_cast<size_t>(i)]
                 .labels[static_cast<size_t>(
                     leaves[static_cast<size_t>(best_l)])]) {
          continue;
        }
        std::vector<int> tied;
        double best = -1e300;
        for (int f = 0; f < 3; ++f) {
          double w =
              want_label[static_cast<size_t>(f)][static_cast<size_t>(best_l)];
          if (w > best + 1e-12) {
            best = w;
            tied = {f};
          } else if (w > best - 1e-12) {
            tied.push_back(f);
          }
        }
        if (tied.size() > 1) {
          std::vector<int> tied2;
          double bt = -1e300;
          for (int f : tied) {
            double w = want_total[static_cast<size_t>(f)];
            if (w > bt + 1e-12) {
              bt = w;
              tied2 = {f};
            } else if (w > bt - 1e-12) {
              tied2.push_back(f);
            }
          }
          tied = tied2;
        }
        int f = tied[tied.size() == 1
                         ? 0
                         : static_cast<size_t>(rng.below(tied.size()))];
        place(i, f);
        --left;
      }
    }
  }

  SplitResult r;
  r.train = take(ds, folds[0]);
  r.val = take(ds, folds[1]);
  r.test = take(ds, folds[2]);
  for (int leaf : h.leaf_ids()) {
    auto count = [&](const Dataset& d) {
      std::int64_t c = 0;
      for (const Sample& s : d.samples) c += s.labels[static_cast<size_t>(leaf)];
      return c;
    };
    if (count(ds) > 0 && count(r.train) == 0) {
      r.warnings.push_back("leaf '" + h.node(leaf).name +
                           "' has no training samples after the split");
    }
  }
  return r;
}

Dataset kshot_sample(const Dataset& train, const LabelHierarchy& h, int k,
                     std::uint64_t seed) {
  if (k < 1) throw ValueError("K must be positive");
  Rng rng = seeded_stream(seed, 0x4508);
  std::set<int> picked;
  for (int leaf : h.leaf_ids()) {
    std::vector<int> cand;
    for (size_t i = 0; i < train.samples.size(); ++i) {
      if (train.samples[i].labels[static_cast<size_t>(leaf)]) {
        cand.push_back(static_cast<int>(i));
      }
    }
    if (cand.empty()) {
      throw ValueError("leaf '" + h.node(leaf).name +
                       "' has no samples to draw from");
    }
    size_t m = std::min(static_cast<size_t>(k), cand.size());
    for (size_t i = 0; i < m; ++i) {
      size_t j = i + static_cast<size_t>(rng.below(cand.size() - i));
      std::swap(cand[i], cand[j]);
      picked.insert(cand[i]);
    }
  }
  return take(train, std::vector<int>(picked.begin(), picked.end()));
}

std::map<int, std::int64_t> leaf_counts(const Dataset& ds,
                                        const LabelHierarchy& h) {
  std::map<int, std::int64_t> out;
  for (int leaf : h.leaf_ids()) {
    std::int64_t c = 0;
    for (const Sample& s : ds.samples) c += s.labels[static_cast<size_t>(leaf)];
    out[leaf] = c;
  }
  return out;
}

namespace {

constexpr char kImageMagic[4] = {'F', '3', '2', 'T'};

template <class T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream& f, const std::string& path) {
  T v{};
  if (!f.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw IoError("truncated file " + path);
  }
  return v;
}

}  // namespace

void write_f32t(const std::string& path, const std::vector<float>& data,
                const std::vector<int>& dims) {
  if (dims.empty() || dims.size() > 4) {
    throw ValueError("image tensors support rank 1 to 4");
  }
  size_t count = 1;
  for (int d : dims) {
    if (d < 1 || d > 0xffff) throw ValueError("image dim out of range");
    count *= static_cast<size_t>(d);
  }
  if (count != data.size()) {
    throw ShapeError("image data has " + std::to_string(data.size()) +
                     " values for dims of " + std::to_string(count));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f.write(kImageMagic, 4);
  put<std::uint32_t>(f, static_cast<std::uint32_t>(dims.size()));
  for (size_t i = 0; i < 4; ++i) {
    put<std::uint16_t>(
        f, i < dims.size() ? static_cast<std::uint16_t>(dims[i]) : 0);
  }
  f.write(reinterpret_cast<const char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!f) throw IoError("short write to " + path);
}

std::vector<float> read_f32t(const std::string& path, std::vector<int>& dims) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, kImageMagic, 4) != 0) {
    throw IoError(path + " is not an image tensor file");
  }
  auto rank = get<std::uint32_t>(f, path);
  if (rank < 1 || rank > 4) {
    throw IoError(path + " declares unsupported rank " + std::to_string(rank));
  }
  dims.clear();
  size_t count = 1;
  for (size_t i = 0; i < 4; ++i) {
    auto d = get<std::uint16_t>(f, path);
    if (i < rank) {
      if (d == 0) throw IoError(path + " declares a zero dimension");
      dims.push_back(d);
      count *= d;
    }
  }
  std::vector<float> data(count);
  if (!f.read(reinterpret_cast<char*>(data.data()),
              static_cast<std::streamsize>(count * sizeof(float)))) {
    throw IoError("truncated file " + path);
  }
  return data;
}

void write_ppm(const std::string& path, const Sample& s, int channels,
               int image_size) {
  if (channels != 3) throw ValueError("PPM output needs 3 channels");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << "P6\n" << image_size << " " << image_size << "\n255\n";
  size_t plane = static_cast<size_t>(image_size) * image_size;
  for (int y = 0; y < image_size; ++y) {
    for (int x = 0; x < image_size; ++x) {
      for (int c = 0; c < 3; ++c) {
        float v = s.image[static_cast<size_t>(c) * plane +
                          static_cast<size_t>(y) * image_size +
                          static_cast<size_t>(x)];
        v = std::min(1.0f, std::max(0.0f, v));
        f.put(static_cast<char>(std::lround(v * 255.0f)));
      }
    }
  }
  if (!f) throw IoError("short write to " + path);
}

std::vector<float> read_ppm(const std::string& path, int& channels,
                            int& image_size) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::string tag;
  int w = 0, h = 0, maxval = 0;
  f >> tag >> w >> h >> maxval;
  if (tag != "P6" || maxval != 255 || w != h || w < 1) {
    throw IoError(path + " is not a square 8-bit P6 image");
  }
  f.get();  // the single whitespace after maxval
  channels = 3;
  image_size = w;
  size_t plane = static_cast<size_t>(w) * h;
  std::vector<float> img(3 * plane);
  for (size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c) {
      int byte = f.get();
      if (byte == EOF) throw IoError("truncated file " + path);
      img[static_cast<size_t>(c) * plane + p] =
          static_cast<float>(byte) / 255.0f;
    }
  }
  return img;
}

void save_dataset(const std::string& dir, const Dataset& ds,
                  const LabelHierarchy& h, bool as_ppm) {
  fs::create_directories(fs::path(dir) / "images");
  {
    std::ofstream f(fs::path(dir) / "hierarchy.yaml");
    if (!f) throw IoError("cannot write " + dir + "/hierarchy.yaml");
    f << h.to_yaml();
  }
  {
    nlohmann::json meta = {{"channels", ds.channels},
                           {"image_size", ds.image_size},
                           {"count", ds.samples.size()}};
    std::ofstream f(fs::path(dir) / "meta.json");
    if (!f) throw IoError("cannot write " + dir + "/meta.json");
    f << meta.dump(2) << "\n";
  }
  std::ofstream man(fs::path(dir) / "manifest.jsonl");
  if (!man) throw IoError("cannot write " + dir + "/manifest.jsonl");
  for (const Sample& s : ds.samples) {
    std::string rel =
        "images/" + s.id + (as_ppm ? std::string(".ppm") : std::string(".f32t"));
    if (as_ppm) {
      write_ppm((fs::path(dir) / rel).string(), s, ds.channels, ds.image_size);
    } else {
      write_f32t((fs::path(dir) / rel).string(), s.image,
                 {ds.channels, ds.image_size, ds.image_size});
    }
    nlohmann::json names = nlohmann::json::array();
    for (size_t j = 0; j < s.labels.size(); ++j) {
      if (s.labels[j]) names.push_back(h.node(static_cast<int>(j)).name);
    }
    nlohmann::json row = {{"id", s.id}, {"image", rel}, {"labels", names}};
    man << row.dump() << "\n";
  }
}

LabelHierarchy load_dataset_hierarchy(const std::string& dir) {
  return LabelHierarchy::from_yaml_file(
      (fs::path(dir) / "hierarchy.yaml").string());
}

Dataset load_dataset(const std::string& dir, const LabelHierarchy& h) {
  std::ifstream meta_f(fs::path(dir) / "meta.json");
  if (!meta_f) throw IoError("cannot read " + dir + "/meta.json");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_f);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(dir + "/meta.json is not valid JSON: " + e.what());
  }
  Dataset ds;
  ds.channels = meta.at("channels").get<int>();
  ds.image_size = meta.at("image_size").get<int>();

  std::ifstream man(fs::path(dir) / "manifest.jsonl");
  if (!man) throw IoError("cannot read " + dir + "/manifest.jsonl");
  std::string line;
  size_t lineno = 0;
  while (std::getline(man, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json row;
    try {
      row = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("manifest line " + std::to_string(lineno) +
                    " is not valid JSON: " + e.what());
    }
    Sample s;
    s.id = row.at("id").get<std::string>();
    std::string rel = row.at("image").get<std::string>();
    std::string full = (fs::path(dir) / rel).string();
    if (rel.size() > 4 && rel.substr(rel.size() - 4) == ".ppm") {
      int c = 0, sz = 0;
      s.image = read_ppm(full, c, sz);
      if (c != ds.channels || sz != ds.image_size) {
        throw ValidationError("sample '" + s.id +
                              "' image geometry disagrees with meta.json");
      }
    } else {
      std::vector<int> dims;
      s.image = read_f32t(full, dims);
      if (dims != std::vector<int>{ds.channels, ds.image_size,
                                   ds.image_size}) {
        throw ValidationError("sample '" + s.id +
                              "' image geometry disagrees with meta.json");
      }
    }
    s.labels.assign(h.size(), 0);
    for (const auto& name : row.at("labels")) {
      std::string nm = name.get<std::string>();
      if (!h.has(nm)) {
        throw ValidationError("sample '" + s.id + "' names unknown label '" +
                              nm + "'");
      }
      s.labels[static_cast<size_t>(h.id_of(nm))] = 1;
    }
    if (!h.is_consistent(s.labels)) {
      throw ValidationError("sample '" + s.id +
                            "' labels violate the hierarchy");
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace maple
