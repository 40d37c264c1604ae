// Copyright 2026 The mmfed Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "mmfed/dataset_io.hpp"
#include "mmfed/nifti.hpp"
#include "mmfed/partition.hpp"
#include "mmfed/regions.hpp"
#include "mmfed/synthetic.hpp"

namespace mmfed::data {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mmfed_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(DirichletPartitionTest, SingleClientOwnsEverything) {
  Rng rng(1);
  PartitionPlan p = dirichlet_partition(17, 1, 2.0, rng);
  ASSERT_EQ(p.weights.size(), 1u);
  EXPECT_EQ(p.weights[0], 1.0);
  ASSERT_EQ(p.assignments.size(), 1u);
  EXPECT_EQ(p.assignments[0].size(), 17u);
}

TEST(DirichletPartitionTest, PlansArePartitionsWithNonEmptyShards) {
  Rng meta(3);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t clients = 1 + meta() % 12;
    const std::size_t n = clients + meta() % 300;
    const double alpha = std::pow(10.0, std::uniform_real_distribution<double>(-2, 3)(meta));
    Rng rng(meta());
    PartitionPlan p = dirichlet_partition(n, clients, alpha, rng);
    ASSERT_NO_THROW(p.validate(n)) << "n=" << n << " N=" << clients << " alpha=" << alpha;
    double s = 0.0;
    for (double w : p.weights) s += w;
    EXPECT_NEAR(s, 1.0, 1e-12);
    std::size_t total = 0;
    for (std::size_t c : p.counts()) {
      EXPECT_GE(c, 1u);
      total += c;
    }
    EXPECT_EQ(total, n);
  }
}

TEST(DirichletPartitionTest, TooFewSamplesRejected) {
  Rng rng(1);
  EXPECT_THROW(dirichlet_partition(3, 4, 2.0, rng), std::invalid_argument);
  EXPECT_THROW(dirichlet_partition(10, 0, 2.0, rng), std::invalid_argument);
  EXPECT_THROW(dirichlet_partition(10, 2, 0.0, rng), std::invalid_argument);
}

TEST(DirichletPartitionTest, LargestRemainderCounts) {
  // spare = 10: floors 5, 3, 2 with no remainder, plus the 1-sample floor.
  EXPECT_EQ(largest_remainder_counts({0.5, 0.3, 0.2}, 13), (std::vector<std::size_t>{6, 4, 3}));
  // spare = 4: exact 1.6, 1.2, 1.2 -> floors 1, 1, 1 and one extra to the
  // largest remainder.
  EXPECT_EQ(largest_remainder_counts({0.4, 0.3, 0.3}, 7), (std::vector<std::size_t>{3, 2, 2}));
  EXPECT_EQ(largest_remainder_counts({1.0, 0.0, 0.0}, 3), (std::vector<std::size_t>{1, 1, 1}));
}

TEST(DirichletPartitionTest, MomentsMatchClosedForm) {
  Rng rng(2026);
  const std::size_t n = 4, draws = 10000;
  std::vector<double> sum(n, 0.0), sq(n, 0.0);
  for (std::size_t d = 0; d < draws; ++d) {
    auto w = dirichlet_sample(n, 2.0, rng);
    for (std::size_t i = 0; i < n; ++i) {
      sum[i] += w[i];
      sq[i] += w[i] * w[i];
    }
  }
  const double var_expected = (1.0 / 4) * (1 - 1.0 / 4) / (4 * 2.0 + 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double mean = sum[i] / draws;
    const double var = sq[i] / draws - mean * mean;
    EXPECT_GE(mean, 0.245);
    EXPECT_LE(mean, 0.255);
    EXPECT_NEAR(var, var_expected, 0.1 * var_expected);
  }
}

TEST(DirichletPartitionTest, LargeAlphaConcentrates) {
  Rng rng(5);
  for (int d = 0; d < 1000; ++d) {
    auto w = dirichlet_sample(4, 1e4, rng);
    for (double v : w) EXPECT_LT(std::abs(v - 0.25), 0.02);
  }
}

TEST(DirichletPartitionTest, SeededOverloadIsDeterministic) {
  PartitionPlan a = dirichlet_partition(100, 4, 2.0, std::uint64_t{9});
  PartitionPlan b = dirichlet_partition(100, 4, 2.0, std::uint64_t{9});
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_EQ(a.assignments, b.assignments);
  EXPECT_EQ(a.seed, 9u);
}

TEST(SplitTest, SeventyTwentyTen) {
  Rng rng(1);
  Split s = split_dataset(200, 0.7, 0.2, 0.1, rng);
  EXPECT_EQ(s.train.size(), 140u);
  EXPECT_EQ(s.val.size(), 40u);
  EXPECT_EQ(s.test.size(), 20u);
  std::vector<int> seen(200, 0);
  for (const auto* part : {&s.train, &s.val, &s.test})
    for (std::size_t i : *part) ++seen[i];
  for (int c : seen) EXPECT_EQ(c, 1);
  EXPECT_THROW(split_dataset(10, 0.7, 0.2, 0.2, rng), std::invalid_argument);
}

TEST(RegionsTest, Examples) {
  std::vector<int> zeros(9, 0);
  auto r = labelmap_to_regions(zeros);
  for (Region g : kRegions)
    for (auto v : r[g]) EXPECT_EQ(v, 0);

  auto one = labelmap_to_regions(std::vector<int>{0, 4, 0});
  EXPECT_EQ(one.et, (Mask{0, 1, 0}));
  EXPECT_EQ(one.tc, (Mask{0, 1, 0}));
  EXPECT_EQ(one.wt, (Mask{0, 1, 0}));

  auto mix = labelmap_to_regions(std::vector<int>{1, 2, 4, 0});
  auto count = [](const Mask& m) { return std::accumulate(m.begin(), m.end(), 0); };
  EXPECT_EQ(count(mix.et), 1);
  EXPECT_EQ(count(mix.tc), 2);
  EXPECT_EQ(count(mix.wt), 3);
  EXPECT_THROW(labelmap_to_regions(std::vector<int>{3}), std::invalid_argument);
}

bool nested(const RegionMasks& r) {
  for (std::size_t i = 0; i < r.wt.size(); ++i) {
    if (r.et[i] && !r.tc[i]) return false;
    if (r.tc[i] && !r.wt[i]) return false;
  }
  return true;
}

TEST(RegionsTest, AlwaysNested) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> l(64);
    for (int& v : l) v = class_to_label(rng() % 4);
    EXPECT_TRUE(nested(labelmap_to_regions(l)));
  }
}

TEST(SyntheticTest, NestedLabelsAndNormalizedImages) {
  auto ds = generate_synthetic_dataset(50, {32, 0.05}, 1);
  ASSERT_EQ(ds.size(), 50u);
  for (const auto& s : ds) {
    ASSERT_NO_THROW(s.validate());
    ASSERT_EQ(s.images.size(), kNumModalities);
    auto r = labelmap_to_regions(s.labels);
    EXPECT_TRUE(nested(r));
    EXPECT_GT(std::accumulate(r.wt.begin(), r.wt.end(), 0), 0);
    for (const auto& img : s.images)
      for (double v : img) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
  }
}

TEST(SyntheticTest, SameSeedIsBitIdentical) {
  EXPECT_EQ(generate_synthetic_dataset(5, {16, 0.05}, 7), generate_synthetic_dataset(5, {16, 0.05}, 7));
  EXPECT_FALSE(generate_synthetic_dataset(1, {16, 0.05}, 7) == generate_synthetic_dataset(1, {16, 0.05}, 8));
  // Sample i does not depend on how many samples are drawn.
  EXPECT_EQ(generate_synthetic_dataset(3, {16, 0.05}, 7)[2], generate_synthetic_dataset(5, {16, 0.05}, 7)[2]);
}

double dice(const Mask& p, const Mask& g) {
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    tp += p[i] && g[i];
    fp += p[i] && !g[i];
    fn += !p[i] && g[i];
  }
  return tp + fp + fn == 0 ? 1.0 : 2 * tp / (2 * tp + fp + fn);
}

TEST(SyntheticTest, FusionBeatsEverySingleModalityThreshold) {
  auto ds = generate_synthetic_dataset(200, {64, 0.05}, 42);
  auto mean_dice = [&](auto predict) {
    double s = 0.0;
    for (const auto& x : ds) {
      Mask p(x.pixels());
      for (std::size_t i = 0; i < p.size(); ++i) p[i] = predict(x, i);
      s += dice(p, labelmap_to_regions(x.labels).wt);
    }
    return s / static_cast<double>(ds.size());
  };
  const double fused = mean_dice([](const MultiModalSample& x, std::size_t i) {
    return x.images[kFlair][i] > 0.55 && x.images[kT2][i] > 0.55;
  });
  EXPECT_GT(fused, 0.9);
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    for (double t = 0.05; t < 1.0; t += 0.05) {
      const double single = mean_dice([&](const MultiModalSample& x, std::size_t i) { return x.images[m][i] > t; });
      EXPECT_LT(single, fused) << "modality " << m << " threshold " << t;
    }
  }
}

NiftiVolume test_volume(std::int16_t type, std::size_t nx = 4, std::size_t ny = 4, std::size_t nz = 2) {
  NiftiVolume v;
  v.dim = {nx, ny, nz};
  v.pixdim = {1.0, 1.5, 2.0};
  v.datatype = type;
  v.data.resize(v.voxels());
  std::mt19937_64 rng(type);
  for (double& x : v.data) {
    switch (type) {
      case kNiftiUint8: x = static_cast<double>(rng() % 256); break;
      case kNiftiInt16: x = static_cast<double>(static_cast<int>(rng() % 60000) - 30000); break;
      case kNiftiInt32: x = static_cast<double>(static_cast<int>(rng() % 2000000) - 1000000); break;
      case kNiftiFloat32: x = static_cast<float>(std::uniform_real_distribution<double>(-100, 100)(rng)); break;
      default: x = std::uniform_real_distribution<double>(-1, 1)(rng); break;
    }
  }
  return v;
}

TEST(NiftiTest, Float32RoundTripIsBitExact) {
  const fs::path dir = temp_dir("nifti_rt");
  for (bool big : {false, true}) {
    for (const char* name : {"v.nii", "v.nii.gz"}) {
      NiftiVolume v = test_volume(kNiftiFloat32);
      v.big_endian = big;
      const std::string path = (dir / name).string();
      write_nifti(path, v);
      NiftiVolume r = read_nifti(path);
      EXPECT_EQ(r.dim, v.dim);
      EXPECT_EQ(r.big_endian, big);
      EXPECT_EQ(r.vox_offset, 352.0f);
      ASSERT_EQ(r.data.size(), v.data.size());
      for (std::size_t i = 0; i < v.data.size(); ++i) {
        EXPECT_EQ(std::bit_cast<std::uint64_t>(r.data[i]), std::bit_cast<std::uint64_t>(v.data[i]));
      }
      EXPECT_EQ(r.pixdim[1], 1.5);
    }
  }
}

TEST(NiftiTest, AllDatatypesRoundTrip) {
  for (std::int16_t t : {kNiftiUint8, kNiftiInt16, kNiftiInt32, kNiftiFloat32, kNiftiFloat64}) {
    NiftiVolume v = test_volume(t, 3, 5, 2);
    v.big_endian = t == kNiftiInt16;
    NiftiVolume r = parse_nifti(encode_nifti(v));
    EXPECT_EQ(r.data, v.data) << "datatype " << t;
    EXPECT_EQ(r.datatype, t);
  }
}

TEST(NiftiTest, ByteSwappedHeaderDetected) {
  NiftiVolume v = test_volume(kNiftiInt16);
  v.big_endian = true;
  io::Bytes b = encode_nifti(v);
  // sizeof_hdr reads as 0x5C010000 in little-endian order, 348 swapped.
  EXPECT_EQ(b[0], 0);
  EXPECT_EQ(b[3], 0x5C);
  EXPECT_TRUE(parse_nifti(b).big_endian);
}

TEST(NiftiTest, ReadsDataAtVoxOffset) {
  NiftiVolume v = test_volume(kNiftiFloat64, 2, 2, 1);
  io::Bytes b = encode_nifti(v);
  EXPECT_EQ(b.size(), 352u + 4 * 8);
  EXPECT_EQ(std::bit_cast<double>(io::Reader(b.data() + 352, 8).u64("x")), v.data[0]);
  EXPECT_EQ(parse_nifti(b).data, v.data);
}

TEST(NiftiTest, ScalingApplied) {
  NiftiVolume v = test_volume(kNiftiInt16, 2, 2, 1);
  v.scl_slope = 0.5f;
  v.scl_inter = 10.0f;
  NiftiVolume r = parse_nifti(encode_nifti(v));
  for (std::size_t i = 0; i < v.data.size(); ++i) EXPECT_EQ(r.data[i], 0.5 * v.data[i] + 10.0);
}

void expect_format_error(const io::Bytes& b, const std::string& needle) {
  try {
    parse_nifti(b);
    ADD_FAILURE() << "accepted, expected error naming " << needle;
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

TEST(NiftiTest, EveryMagicMutationRejected) {
  const io::Bytes good = encode_nifti(test_volume(kNiftiFloat32));
  ASSERT_NO_THROW(parse_nifti(good));
  std::size_t rejected = 0;
  for (std::size_t pos = 344; pos < 348; ++pos) {
    for (int value = 0; value < 256; ++value) {
      if (value == good[pos]) continue;
      io::Bytes b = good;
      b[pos] = static_cast<std::uint8_t>(value);
      EXPECT_THROW(parse_nifti(b), FormatError) << "pos " << pos << " value " << value;
      ++rejected;
    }
  }
  EXPECT_EQ(rejected, 4u * 255u);
}

TEST(NiftiTest, InvalidFieldsNamed) {
  const io::Bytes good = encode_nifti(test_volume(kNiftiFloat32));
  io::Bytes b = good;
  b[70] = 32;  // complex64
  expect_format_error(b, "datatype");
  b = good;
  b.resize(good.size() - 3);
  expect_format_error(b, "voxel data");
  b = good;
  b[0] = 0;
  b[1] = 0;
  expect_format_error(b, "sizeof_hdr");
  b = good;
  b.resize(200);
  expect_format_error(b, "header truncated");
  b = good;
  b[72] = 64;
  expect_format_error(b, "bitpix");
  b = good;
  std::memcpy(b.data() + 344, "ni1\0", 4);
  expect_format_error(b, "ni1");
}

TEST(SampleFileTest, RoundTripAndDirectory) {
  auto ds = generate_synthetic_dataset(3, {16, 0.05}, 3);
  EXPECT_EQ(decode_sample(encode_sample(ds[0])), ds[0]);
  const fs::path dir = temp_dir("fms");
  write_sample_dir(dir.string(), ds);
  EXPECT_TRUE(fs::exists(dir / "sample_00002.fms"));
  EXPECT_EQ(read_sample_dir(dir.string()), ds);
}

TEST(SampleFileTest, CorruptFilesRejected) {
  auto s = generate_synthetic_dataset(1, {8, 0.05}, 3)[0];
  io::Bytes good = encode_sample(s);
  io::Bytes b = good;
  b[0] = 'X';
  EXPECT_THROW(decode_sample(b), FormatError);
  b = good;
  b.pop_back();
  EXPECT_THROW(decode_sample(b), FormatError);
  b = good;
  b[b.size() - 4] = 3;
  EXPECT_THROW(decode_sample(b), FormatError);
}

TEST(NiftiCasesTest, LoadsLargestTumorSlice) {
  const fs::path root = temp_dir("cases");
  const fs::path c = root / "case_001";
  fs::create_directories(c);
  NiftiVolume seg;
  seg.dim = {8, 8, 3};
  seg.datatype = kNiftiUint8;
  seg.data.assign(seg.voxels(), 0.0);
  for (std::size_t i = 0; i < 10; ++i) seg.data[64 + 10 + i] = 2;  // slice 1
  seg.data[2 * 64 + 5] = 4;                                         // slice 2
  write_nifti((c / "case_001_seg.nii.gz").string(), seg);
  const char* keys[] = {"t1", "t1ce", "t2", "flair"};
  for (int m = 0; m < 4; ++m) {
    NiftiVolume v = seg;
    v.datatype = kNiftiFloat32;
    for (std::size_t i = 0; i < v.voxels(); ++i) v.data[i] = static_cast<double>(i % 64) * (m + 1);
    write_nifti((c / (std::string("case_001_") + keys[m] + ".nii.gz")).string(), v);
  }
  auto ds = load_nifti_cases(root.string(), 8);
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(std::count(ds[0].labels.begin(), ds[0].labels.end(), 2), 10);
  EXPECT_EQ(ds[0].images[0][0], 0.0);
  EXPECT_EQ(ds[0].images[3][63], 1.0);
}

}  // namespace
}  // namespace mmfed::data
