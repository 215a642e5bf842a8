#pragma once

// CIFAR-10 binary ingestion (3073-byte records: 1 label byte + 3072 pixel
// bytes, channel-major R,G,B, each channel 32x32 row-major), deterministic
// subsetting, and the synthetic fixture dataset.

#include <cstdint>
#include <string>
#include <vector>

#include "advlab/autodiff.hpp"

namespace advlab::data {

inline constexpr std::size_t kImageBytes = 3072;  // 3 * 32 * 32
inline constexpr std::size_t kRecordBytes = 3073;

struct Dataset {
    std::vector<float> images;         // N * 3072 values in [0,1]
    std::vector<std::uint8_t> labels;  // N values in 0..9
    std::string name;

    std::size_t size() const { return labels.size(); }
};

Dataset load_cifar10(const std::vector<std::string>& paths);
void save_cifar10(const Dataset& ds, const std::string& path);

// Seeded sample of n records without replacement; chosen records keep their
// original relative order.
Dataset subset(const Dataset& ds, std::size_t n, std::uint64_t seed);

// Class-conditional fixture: class c gets a bright 8x8 block at a distinct
// position plus uniform noise of amplitude 0.1, clamped to [0,1].
Dataset synthetic_dataset(std::uint64_t seed, std::size_t n, std::size_t num_classes);

template <class Real>
ad::Tensor<Real> batch_images(const Dataset& ds, const std::vector<std::size_t>& idx) {
    std::vector<Real> v(idx.size() * kImageBytes);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const float* src = ds.images.data() + idx[i] * kImageBytes;
        for (std::size_t j = 0; j < kImageBytes; ++j)
            v[i * kImageBytes + j] = static_cast<Real>(src[j]);
    }
    return ad::constant<Real>({idx.size(), 3, 32, 32}, std::move(v));
}

std::vector<std::int64_t> batch_labels(const Dataset& ds,
                                       const std::vector<std::size_t>& idx);

}  // namespace advlab::data
