#include "advlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "advlab/rng.hpp"

namespace advlab::data {

Dataset load_cifar10(const std::vector<std::string>& paths) {
    Dataset ds;
    ds.name = "cifar10";
    for (const std::string& path : paths) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("load_cifar10: cannot open " + path);
        std::vector<char> bytes((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
        if (bytes.size() % kRecordBytes != 0)
            throw std::runtime_error("load_cifar10: " + path + " has " +
                                     std::to_string(bytes.size()) +
                                     " bytes, not a multiple of 3073");
        const std::size_t records = bytes.size() / kRecordBytes;
        for (std::size_t r = 0; r < records; ++r) {
            const std::size_t off = r * kRecordBytes;
            const auto label = static_cast<std::uint8_t>(bytes[off]);
            if (label > 9)
                throw std::runtime_error("load_cifar10: " + path + ": label byte " +
                                         std::to_string(label) + " > 9 at offset " +
                                         std::to_string(off));
            ds.labels.push_back(label);
            for (std::size_t j = 0; j < kImageBytes; ++j)
                ds.images.push_back(
                    static_cast<float>(static_cast<std::uint8_t>(bytes[off + 1 + j])) /
                    255.0f);
        }
    }
    return ds;
}

void save_cifar10(const Dataset& ds, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_cifar10: cannot open " + path);
    for (std::size_t r = 0; r < ds.size(); ++r) {
        f.put(static_cast<char>(ds.labels[r]));
        const float* img = ds.images.data() + r * kImageBytes;
        for (std::size_t j = 0; j < kImageBytes; ++j) {
            const float v = std::min(std::max(img[j], 0.0f), 1.0f);
            f.put(static_cast<char>(
                static_cast<std::uint8_t>(std::lround(v * 255.0f))));
        }
    }
    if (!f) throw std::runtime_error("save_cifar10: write failed for " + path);
}

Dataset subset(const Dataset& ds, std::size_t n, std::uint64_t seed) {
    if (n > ds.size())
        ad::fail("subset: n = " + std::to_string(n) + " exceeds dataset size " +
                 std::to_string(ds.size()));
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    Rng rng = Rng(seed).fork("subset");
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    Dataset out;
    out.name = ds.name;
    out.labels.reserve(n);
    out.images.reserve(n * kImageBytes);
    for (std::size_t i : idx) {
        out.labels.push_back(ds.labels[i]);
        out.images.insert(out.images.end(), ds.images.begin() + i * kImageBytes,
                          ds.images.begin() + (i + 1) * kImageBytes);
    }
    return out;
}

Dataset synthetic_dataset(std::uint64_t seed, std::size_t n, std::size_t num_classes) {
    if (num_classes < 1 || num_classes > 10)
        ad::fail("synthetic_dataset: num_classes must be in 1..10");
    if (n < num_classes) ad::fail("synthetic_dataset: n must be >= num_classes");
    Dataset ds;
    ds.name = "synthetic";
    ds.labels.reserve(n);
    ds.images.resize(n * kImageBytes);
    Rng root = Rng(seed).fork("synthetic");
    for (std::size_t i = 0; i < n; ++i) {
        const auto c = static_cast<std::uint8_t>(i % num_classes);
        ds.labels.push_back(c);
        Rng rng = root.fork(i);
        float* img = ds.images.data() + i * kImageBytes;
        for (std::size_t j = 0; j < kImageBytes; ++j)
            img[j] = static_cast<float>(rng.uniform() * 0.1);
        // Distinct block position per class on an 8-pixel grid.
        const std::size_t bi = (c % 4) * 8, bj = (c / 4) * 8;
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t di = 0; di < 8; ++di)
                for (std::size_t dj = 0; dj < 8; ++dj) {
                    float& p = img[ch * 1024 + (bi + di) * 32 + (bj + dj)];
                    p = std::min(p + 0.9f, 1.0f);
                }
    }
    return ds;
}

std::vector<std::int64_t> batch_labels(const Dataset& ds,
                                       const std::vector<std::size_t>& idx) {
    std::vector<std::int64_t> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(ds.labels[i]);
    return out;
}

}  // namespace advlab::data
