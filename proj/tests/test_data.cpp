#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "advlab/data.hpp"
#include "helpers.hpp"

using namespace advlab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("advlab_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("cifar10 loader: record framing and byte scaling") {
    TempDir tmp;
    std::vector<std::uint8_t> bytes(2 * data::kRecordBytes, 0);
    bytes[0] = 7;                       // label of record 0
    bytes[1] = 255;                     // first pixel byte
    bytes[data::kRecordBytes] = 2;      // label of record 1
    bytes[data::kRecordBytes + 1] = 0;  // first pixel of record 1
    write_bytes(tmp.file("two.bin"), bytes);

    auto ds = data::load_cifar10({tmp.file("two.bin")});
    REQUIRE(ds.size() == 2);
    CHECK(ds.labels[0] == 7);
    CHECK(ds.labels[1] == 2);
    CHECK(ds.images[0] == 1.0f);
    CHECK(ds.images[data::kImageBytes] == 0.0f);
}

TEST_CASE("cifar10 loader: malformed inputs carry file and offset diagnostics") {
    TempDir tmp;
    write_bytes(tmp.file("trunc.bin"), std::vector<std::uint8_t>(100, 0));
    CHECK_THROWS_WITH_AS(data::load_cifar10({tmp.file("trunc.bin")}),
                         doctest::Contains("trunc.bin"), std::runtime_error);

    std::vector<std::uint8_t> bad(2 * data::kRecordBytes, 0);
    bad[data::kRecordBytes] = 11;  // label byte out of range in record 1
    write_bytes(tmp.file("badlabel.bin"), bad);
    CHECK_THROWS_WITH_AS(data::load_cifar10({tmp.file("badlabel.bin")}),
                         doctest::Contains(std::to_string(data::kRecordBytes).c_str()),
                         std::runtime_error);

    CHECK_THROWS_AS(data::load_cifar10({tmp.file("missing.bin")}), std::runtime_error);
}

TEST_CASE("cifar10 loader: five 10k batches give 50000 records") {
    TempDir tmp;
    std::vector<std::string> paths;
    for (int b = 0; b < 5; ++b) {
        auto part = data::synthetic_dataset(100 + b, 10000, 10);
        paths.push_back(tmp.file("batch_" + std::to_string(b) + ".bin"));
        data::save_cifar10(part, paths.back());
    }
    auto ds = data::load_cifar10(paths);
    CHECK(ds.size() == 50000);
}

TEST_CASE("binary round-trip is byte- and bit-identical") {
    TempDir tmp;
    auto ds = data::synthetic_dataset(17, 25, 10);

    // one save quantizes to the byte grid; after that the cycle is exact
    data::save_cifar10(ds, tmp.file("a.bin"));
    auto a = data::load_cifar10({tmp.file("a.bin")});
    data::save_cifar10(a, tmp.file("b.bin"));
    auto b = data::load_cifar10({tmp.file("b.bin")});
    REQUIRE(a.size() == b.size());
    CHECK(a.labels == b.labels);
    for (std::size_t i = 0; i < a.images.size(); ++i) CHECK(a.images[i] == b.images[i]);

    std::ifstream fa(tmp.file("a.bin"), std::ios::binary), fb(tmp.file("b.bin"), std::ios::binary);
    std::vector<char> ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::vector<char> bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(ba == bb);
}

TEST_CASE("subset: identity, empty, determinism, bounds") {
    auto ds = data::synthetic_dataset(23, 40, 10);

    auto full = data::subset(ds, ds.size(), 1);
    CHECK(full.labels == ds.labels);  // order preserved when everything is chosen
    CHECK(full.images == ds.images);

    CHECK(data::subset(ds, 0, 1).size() == 0);

    auto s1 = data::subset(ds, 13, 9);
    auto s2 = data::subset(ds, 13, 9);
    CHECK(s1.labels == s2.labels);
    CHECK(s1.images == s2.images);
    auto s3 = data::subset(ds, 13, 10);
    CHECK(s1.labels != s3.labels);

    CHECK_THROWS_AS(data::subset(ds, 41, 1), std::invalid_argument);
}

TEST_CASE("synthetic dataset: coverage, range, round-robin labels") {
    auto ds = data::synthetic_dataset(31, 10, 10);
    REQUIRE(ds.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) CHECK(ds.labels[i] == i);  // one per class

    auto big = data::synthetic_dataset(32, 64, 10);
    for (float v : big.images) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    for (std::size_t i = 0; i < big.size(); ++i) CHECK(big.labels[i] == i % 10);

    CHECK_THROWS_AS(data::synthetic_dataset(1, 5, 10), std::invalid_argument);
    CHECK_THROWS_AS(data::synthetic_dataset(1, 5, 0), std::invalid_argument);
}
