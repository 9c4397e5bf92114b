#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "saefd/half.hpp"
#include "saefd/io.hpp"
#include "saefd/rng.hpp"

using namespace saefd;
namespace fs = std::filesystem;

namespace {
std::string temp_file(const char* name) {
    return (fs::temp_directory_path() / name).string();
}
}  // namespace

TEST_CASE("rng streams are deterministic and tag-separated") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

    Rng c(derive_seed(7, 1)), d(derive_seed(7, 2));
    REQUIRE(c.next_u64() != d.next_u64());

    Rng e(5);
    auto p1 = e.permutation(20);
    Rng f(5);
    auto p2 = f.permutation(20);
    REQUIRE(p1 == p2);
    std::vector<int> sorted = p1;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 20; ++i) REQUIRE(sorted[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("rng distributions have sane moments") {
    Rng rng(123);
    double sum = 0, sumsq = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sumsq += x * x;
    }
    REQUIRE(std::abs(sum / n) < 0.05);
    REQUIRE(std::abs(sumsq / n - 1.0) < 0.05);

    for (int i = 0; i < 1000; ++i) {
        const double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        const auto k = rng.below(7);
        REQUIRE(k < 7);
    }
    REQUIRE_THROWS_AS(rng.below(0), usage_error);
}

TEST_CASE("binary16 round-to-nearest-even") {
    // 1/3 in binary16 reads back as 0.333251953125
    REQUIRE(float_to_half(1.0f / 3.0f) == 0x3555);
    REQUIRE(half_to_float(0x3555) == 0.333251953125f);

    // ties go to the even significand
    REQUIRE(float_to_half(1.00048828125f) == 0x3c00);  // midpoint of 0x3c00/0x3c01
    REQUIRE(float_to_half(1.00146484375f) == 0x3c02);  // midpoint of 0x3c01/0x3c02

    // overflow and max-finite behavior
    REQUIRE(half_to_float(float_to_half(65504.0f)) == 65504.0f);
    REQUIRE(float_to_half(65519.0f) == 0x7bff);  // below the inf midpoint
    REQUIRE(float_to_half(65520.0f) == 0x7c00);  // midpoint: ties to inf
    REQUIRE(float_to_half(1e30f) == 0x7c00);
    REQUIRE(float_to_half(-1e30f) == 0xfc00);

    // subnormal range
    REQUIRE(float_to_half(std::ldexp(1.0f, -24)) == 0x0001);
    REQUIRE(float_to_half(std::ldexp(1.0f, -25)) == 0x0000);  // tie with zero
    REQUIRE(float_to_half(std::ldexp(1.2f, -25)) == 0x0001);
    REQUIRE(float_to_half(-0.0f) == 0x8000);
    REQUIRE(float_to_half(0.0f) == 0x0000);
}

TEST_CASE("binary16 round-trips every finite bit pattern") {
    for (std::uint32_t h = 0; h <= 0xffff; ++h) {
        const auto half = static_cast<std::uint16_t>(h);
        if (((half >> 10) & 0x1f) == 0x1f) continue;  // inf/nan
        REQUIRE(float_to_half(half_to_float(half)) == half);
    }
}

TEST_CASE("binary writer/reader round-trip and truncation offsets") {
    const std::string path = temp_file("saefd_io_test.bin");
    {
        BinaryWriter w(path);
        w.u8(7);
        w.u16(0xbeef);
        w.u32(0xdeadbeefu);
        w.u64(0x0123456789abcdefull);
        w.f32(3.25f);
        w.close();
    }
    {
        BinaryReader r(path);
        REQUIRE(r.u8() == 7);
        REQUIRE(r.u16() == 0xbeef);
        REQUIRE(r.u32() == 0xdeadbeefu);
        REQUIRE(r.u64() == 0x0123456789abcdefull);
        REQUIRE(r.f32() == 3.25f);
        r.expect_eof();
    }
    {
        BinaryReader r(path);
        r.u8();
        r.u16();
        r.u32();
        r.u64();
        try {
            r.u64();  // runs past the final f32
            FAIL("expected format_error");
        } catch (const format_error& e) {
            REQUIRE(std::string(e.what()).find("offset") != std::string::npos);
        }
    }
    fs::remove(path);
}

TEST_CASE("sfdm container round-trips named tensors") {
    const std::string path = temp_file("saefd_sfdm_test.sfdm");
    MatF a(2, 3);
    a << 1, 2, 3, 4, 5, 6;
    MatF b(1, 4);
    b << -1, 0, 1, 2;
    save_sfdm(path, ArtifactKind::sae,
              {NamedTensor::from_mat("a", a), NamedTensor::from_mat("b", b)});
    const SfdmFile f = load_sfdm(path);
    REQUIRE(f.kind == ArtifactKind::sae);
    REQUIRE(f.tensors.size() == 2);
    REQUIRE(f.get("a").to_mat() == a);
    REQUIRE(f.get("b").to_mat() == b);
    REQUIRE_THROWS_AS(f.get("missing"), format_error);

    // corrupt magic
    {
        std::fstream io(path, std::ios::in | std::ios::out | std::ios::binary);
        io.seekp(0);
        io.write("XXXX", 4);
    }
    REQUIRE_THROWS_AS(load_sfdm(path), format_error);

    // truncation names an offset
    save_sfdm(path, ArtifactKind::model, {NamedTensor::from_mat("a", a)});
    const auto size = fs::file_size(path);
    fs::resize_file(path, size - 3);
    try {
        load_sfdm(path);
        FAIL("expected format_error");
    } catch (const format_error& e) {
        REQUIRE(std::string(e.what()).find("offset") != std::string::npos);
    }
    fs::remove(path);
}

TEST_CASE("file checksum is content-determined") {
    const std::string p1 = temp_file("saefd_ck1.bin"), p2 = temp_file("saefd_ck2.bin");
    for (const auto& p : {p1, p2}) {
        BinaryWriter w(p);
        w.u32(12345);
        w.close();
    }
    REQUIRE(file_checksum(p1) == file_checksum(p2));
    {
        BinaryWriter w(p2);
        w.u32(12346);
        w.close();
    }
    REQUIRE(file_checksum(p1) != file_checksum(p2));
    fs::remove(p1);
    fs::remove(p2);
}
