#include <gtest/gtest.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "lhunet/dataio.hpp"

using namespace lhunet;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("lhunet_dataio_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

VolumeRecord random_float_record(Rng& rng) {
    VolumeRecord rec;
    rec.dtype = "float32";
    rec.spacing = {1.5, 0.75, 2.0};
    rec.names = {"flair", "t1"};
    rec.fdata = Tensor<float>({2, 5, 4, 3});
    for (auto& v : rec.fdata.data) v = (float)rng.uniform(-10, 10);
    return rec;
}

}  // namespace

TEST(VolumeIO, Float32RoundTripIsBitExact) {
    fs::path dir = scratch_dir("f32");
    Rng rng(7);
    VolumeRecord rec = random_float_record(rng);
    write_volume((dir / "vol").string(), rec);
    VolumeRecord back = read_volume((dir / "vol").string());
    ASSERT_EQ(back.dtype, "float32");
    ASSERT_EQ(back.fdata.shape, rec.fdata.shape);
    ASSERT_EQ(0, std::memcmp(back.fdata.data.data(), rec.fdata.data.data(),
                             rec.fdata.numel() * sizeof(float)));
    EXPECT_EQ(back.spacing, rec.spacing);
    EXPECT_EQ(back.names, rec.names);
}

TEST(VolumeIO, Uint8RoundTripIsBitExact) {
    fs::path dir = scratch_dir("u8");
    Rng rng(8);
    VolumeRecord rec;
    rec.dtype = "uint8";
    rec.spacing = {1, 1, 1};
    rec.udata = Tensor<uint8_t>({1, 3, 4, 5});
    for (auto& v : rec.udata.data) v = (uint8_t)rng.uniform_int(0, 3);
    write_volume((dir / "lab").string(), rec);
    VolumeRecord back = read_volume((dir / "lab").string());
    ASSERT_EQ(back.dtype, "uint8");
    ASSERT_EQ(back.udata.shape, rec.udata.shape);
    EXPECT_EQ(back.udata.data, rec.udata.data);
}

TEST(VolumeIO, TruncatedBlobIsRejected) {
    fs::path dir = scratch_dir("trunc");
    Rng rng(9);
    VolumeRecord rec = random_float_record(rng);
    write_volume((dir / "vol").string(), rec);
    fs::resize_file(dir / "vol.raw", fs::file_size(dir / "vol.raw") - 4);
    EXPECT_THROW(read_volume((dir / "vol").string()), std::exception);
}

TEST(VolumeIO, UnknownDtypeIsRejected) {
    fs::path dir = scratch_dir("dtype");
    Rng rng(10);
    VolumeRecord rec = random_float_record(rng);
    write_volume((dir / "vol").string(), rec);
    // doctor the sidecar to claim an unsupported dtype
    std::ifstream in(dir / "vol.json");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    size_t at = text.find("float32");
    ASSERT_NE(at, std::string::npos);
    text.replace(at, 7, "float64");
    std::ofstream out(dir / "vol.json");
    out << text;
    out.close();
    EXPECT_THROW(read_volume((dir / "vol").string()), std::exception);
}

TEST(VolumeIO, WriteRejectsShapeDataMismatch) {
    fs::path dir = scratch_dir("mismatch");
    VolumeRecord rec;
    rec.dtype = "float32";
    rec.fdata = Tensor<float>({1, 2, 2, 2});
    rec.fdata.shape = {1, 2, 2, 3};  // header now disagrees with the payload
    EXPECT_THROW(write_volume((dir / "bad").string(), rec), std::exception);
}

namespace {

// hand-assembles a minimal uncompressed NIfTI-1 file
void write_nifti(const fs::path& path, int16_t datatype, const std::vector<int16_t>& dims,
                 const std::array<float, 3>& pixdim, float slope, float inter,
                 const std::vector<char>& payload) {
    std::vector<char> hdr(352, 0);
    auto put_i32 = [&](size_t off, int32_t v) { std::memcpy(hdr.data() + off, &v, 4); };
    auto put_i16 = [&](size_t off, int16_t v) { std::memcpy(hdr.data() + off, &v, 2); };
    auto put_f32 = [&](size_t off, float v) { std::memcpy(hdr.data() + off, &v, 4); };
    put_i32(0, 348);
    // dims[0] is ndim, dims[1..] the axis sizes, exactly as stored on disk
    for (size_t i = 0; i < dims.size(); ++i) put_i16(40 + 2 * i, dims[i]);
    put_i16(70, datatype);
    put_f32(76, 1.0f);
    for (int i = 0; i < 3; ++i) put_f32(80 + 4 * i, pixdim[i]);
    put_f32(108, 352.0f);  // vox_offset
    put_f32(112, slope);
    put_f32(116, inter);
    hdr[344] = 'n';
    hdr[345] = '+';
    hdr[346] = '1';
    std::ofstream out(path, std::ios::binary);
    out.write(hdr.data(), (std::streamsize)hdr.size());
    out.write(payload.data(), (std::streamsize)payload.size());
}

}  // namespace

TEST(Nifti, ReadsFloat32VolumeWithXFastestOrder) {
    fs::path dir = scratch_dir("nifti1");
    int nx = 2, ny = 3, nz = 4;
    std::vector<float> vals(nx * ny * nz);
    for (size_t i = 0; i < vals.size(); ++i) vals[i] = (float)i;
    std::vector<char> payload(vals.size() * 4);
    std::memcpy(payload.data(), vals.data(), payload.size());
    write_nifti(dir / "a.nii", 16, {3, (int16_t)nx, (int16_t)ny, (int16_t)nz},
                {0.7f, 1.25f, 3.0f}, 0.0f, 0.0f, payload);
    VolumeRecord rec = read_nifti((dir / "a.nii").string());
    ASSERT_EQ(rec.dtype, "float32");
    ASSERT_EQ(rec.fdata.shape, (Shape{1, nz, ny, nx}));
    // pixdim is (dx, dy, dz); record spacing is slowest-first (dz, dy, dx)
    EXPECT_NEAR(rec.spacing[0], 3.0, 1e-6);
    EXPECT_NEAR(rec.spacing[1], 1.25, 1e-6);
    EXPECT_NEAR(rec.spacing[2], 0.7, 1e-6);
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x)
                EXPECT_EQ(rec.fdata.data[((size_t)z * ny + y) * nx + x],
                          (float)(x + nx * (y + (size_t)ny * z)));
}

TEST(Nifti, AppliesScalingAndConvertsIntegers) {
    fs::path dir = scratch_dir("nifti2");
    std::vector<char> payload = {0, 1, 2, 3, 4, 5};
    write_nifti(dir / "b.nii", 2, {3, 3, 2, 1}, {1.0f, 1.0f, 1.0f}, 2.0f, 1.0f, payload);
    VolumeRecord rec = read_nifti((dir / "b.nii").string());
    ASSERT_EQ(rec.fdata.numel(), 6);
    for (int i = 0; i < 6; ++i) EXPECT_EQ(rec.fdata.data[i], 2.0f * i + 1.0f);
}

TEST(Nifti, RejectsBadMagicAndUnknownDatatype) {
    fs::path dir = scratch_dir("nifti3");
    std::vector<char> payload(8, 0);
    write_nifti(dir / "c.nii", 16, {3, 2, 1, 1}, {1, 1, 1}, 0, 0, payload);
    {
        std::fstream f(dir / "c.nii", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(344);
        f.write("xxx", 3);
    }
    EXPECT_THROW(read_nifti((dir / "c.nii").string()), std::exception);
    write_nifti(dir / "d.nii", 128, {3, 2, 1, 1}, {1, 1, 1}, 0, 0, payload);  // RGB: unsupported
    EXPECT_THROW(read_nifti((dir / "d.nii").string()), std::exception);
}

namespace {

PhantomSpec base_spec() {
    PhantomSpec spec;
    spec.shape = {24, 24, 24};
    spec.n_blobs = 1;
    spec.radius_min = 5.0;
    spec.radius_max = 5.0;
    spec.class_intensity = {0.8};
    spec.noise = 0.0;
    spec.seed = 41;
    return spec;
}

int64_t count_label(const VolumeRecord& lab, uint8_t c) {
    int64_t n = 0;
    for (uint8_t v : lab.udata.data) n += (v == c);
    return n;
}

}  // namespace

TEST(Phantom, SingleBlobVoxelCountMatchesEllipsoidVolume) {
    PhantomSpec spec = base_spec();
    auto [img, lab] = make_phantom(spec);
    ASSERT_EQ(img.fdata.shape, (Shape{1, 24, 24, 24}));
    ASSERT_EQ(lab.udata.shape, (Shape{1, 24, 24, 24}));
    double analytic = 4.0 / 3.0 * 3.14159265358979323846 * 5.0 * 5.0 * 5.0;
    double got = (double)count_label(lab, 1);
    EXPECT_GT(got, 0);
    EXPECT_NEAR(got, analytic, 0.15 * analytic) << "discretized ellipsoid volume off";
}

TEST(Phantom, SameSeedReproducesBitExactly) {
    PhantomSpec spec = base_spec();
    spec.n_blobs = 4;
    spec.radius_min = 3.0;
    spec.radius_max = 6.0;
    spec.class_intensity = {0.5, 0.9};
    spec.noise = 0.05;
    auto [img1, lab1] = make_phantom(spec);
    auto [img2, lab2] = make_phantom(spec);
    EXPECT_EQ(img1.fdata.data, img2.fdata.data);
    EXPECT_EQ(lab1.udata.data, lab2.udata.data);
}

TEST(Phantom, ZeroBlobsYieldAllBackground) {
    PhantomSpec spec = base_spec();
    spec.n_blobs = 0;
    auto [img, lab] = make_phantom(spec);
    for (uint8_t v : lab.udata.data) EXPECT_EQ(v, 0);
    for (float v : img.fdata.data) EXPECT_EQ(v, 0.0f);
}

TEST(Phantom, NoiseFreeLabelsAndIntensitiesCorrespond) {
    PhantomSpec spec = base_spec();
    spec.n_blobs = 5;
    spec.radius_min = 2.0;
    spec.radius_max = 4.0;
    spec.class_intensity = {0.4, 0.7, 1.0};
    auto [img, lab] = make_phantom(spec);
    bool saw_fg = false;
    for (int64_t i = 0; i < lab.udata.numel(); ++i) {
        uint8_t c = lab.udata.data[i];
        float want = c == 0 ? 0.0f : (float)spec.class_intensity[c - 1];
        ASSERT_EQ(img.fdata.data[i], want) << "voxel " << i;
        saw_fg |= c != 0;
    }
    EXPECT_TRUE(saw_fg);
}

TEST(Phantom, NoiseLeavesGeometryIntact) {
    PhantomSpec spec = base_spec();
    spec.n_blobs = 3;
    spec.radius_min = 3.0;
    spec.radius_max = 5.0;
    auto [img0, lab0] = make_phantom(spec);
    spec.noise = 0.1;
    auto [img1, lab1] = make_phantom(spec);
    EXPECT_EQ(lab0.udata.data, lab1.udata.data);
    EXPECT_NE(img0.fdata.data, img1.fdata.data);
}

TEST(Phantom, RejectsBlobsThatCannotFit) {
    PhantomSpec spec = base_spec();
    spec.shape = {8, 8, 8};
    spec.radius_min = 10.0;
    spec.radius_max = 12.0;
    EXPECT_THROW(make_phantom(spec), std::exception);
}

TEST(Cases, SaveListReadRoundTrip) {
    fs::path dir = scratch_dir("cases");
    PhantomSpec spec = base_spec();
    spec.noise = 0.02;
    for (int i = 0; i < 3; ++i) {
        spec.seed = 100 + i;
        auto [img, lab] = make_phantom(spec);
        save_case(dir.string(), "case" + std::to_string(i), img, lab);
    }
    std::vector<std::string> ids = list_cases(dir.string());
    ASSERT_EQ(ids, (std::vector<std::string>{"case0", "case1", "case2"}));
    spec.seed = 101;
    auto [img, lab] = make_phantom(spec);
    VolumeRecord rimg = read_volume((dir / "case1.img").string());
    VolumeRecord rlab = read_volume((dir / "case1.lab").string());
    EXPECT_EQ(rimg.fdata.data, img.fdata.data);
    EXPECT_EQ(rlab.udata.data, lab.udata.data);
}

namespace {

std::vector<std::string> fake_ids(int n) {
    std::vector<std::string> ids;
    for (int i = 0; i < n; ++i) ids.push_back("rec" + std::to_string(i));
    return ids;
}

}  // namespace

TEST(Split, RatioSplitsTenRecordsEightTwo) {
    SplitManifest m = split_ratio(fake_ids(10), 0.8, 5);
    ASSERT_EQ(m.train.size(), 8u);
    ASSERT_EQ(m.val.size(), 2u);
    std::set<std::string> all(m.train.begin(), m.train.end());
    all.insert(m.val.begin(), m.val.end());
    EXPECT_EQ(all.size(), 10u) << "split lost or duplicated records";
    SplitManifest again = split_ratio(fake_ids(10), 0.8, 5);
    EXPECT_EQ(m.train, again.train);
    EXPECT_EQ(m.val, again.val);
    SplitManifest other = split_ratio(fake_ids(10), 0.8, 6);
    EXPECT_NE(m.train, other.train) << "different seeds should permute differently";
}

TEST(Split, KfoldPartitionsExactly) {
    std::vector<std::string> ids = fake_ids(100);
    SplitManifest m = split_kfold(ids, 5, 77);
    ASSERT_EQ(m.folds.size(), 5u);
    std::set<std::string> all;
    for (const auto& fold : m.folds) {
        EXPECT_EQ(fold.size(), 20u);
        for (const auto& id : fold) EXPECT_TRUE(all.insert(id).second) << id << " duplicated";
    }
    EXPECT_EQ(all.size(), ids.size());
    SplitManifest again = split_kfold(ids, 5, 77);
    EXPECT_EQ(m.folds, again.folds);
}

TEST(Split, UnevenKfoldSizesDifferByAtMostOne) {
    SplitManifest m = split_kfold(fake_ids(13), 4, 3);
    ASSERT_EQ(m.folds.size(), 4u);
    size_t total = 0, mn = 1000, mx = 0;
    for (const auto& fold : m.folds) {
        total += fold.size();
        mn = std::min(mn, fold.size());
        mx = std::max(mx, fold.size());
    }
    EXPECT_EQ(total, 13u);
    EXPECT_LE(mx - mn, 1u);
}

TEST(Split, ManifestFileRoundTrips) {
    fs::path dir = scratch_dir("manifest");
    SplitManifest m = split_ratio(fake_ids(10), 0.8, 5);
    m.folds = split_kfold(fake_ids(9), 3, 2).folds;
    write_manifest((dir / "splits.json").string(), m);
    SplitManifest back = read_manifest((dir / "splits.json").string());
    EXPECT_EQ(back.train, m.train);
    EXPECT_EQ(back.val, m.val);
    EXPECT_EQ(back.folds, m.folds);
}
