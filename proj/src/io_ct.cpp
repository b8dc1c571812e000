#include "bonnet/io_ct.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

#include <json.hpp>
#include <zlib.h>

namespace bonnet {

uint64_t fnv1a64(const void* data, size_t len, uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < len; ++i) {
        h ^= uint64_t(p[i]);
        h *= 1099511628211ull;
    }
    return h;
}

std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(bool(in), Err::IoError, "cannot open '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    require(!in.bad(), Err::IoError, "read failed for '" + path + "'");
    return bytes;
}

void write_file_bytes(const std::string& path, const void* data, size_t len) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(bool(out), Err::IoError, "cannot create '" + path + "'");
    out.write(static_cast<const char*>(data), std::streamsize(len));
    require(bool(out), Err::IoError, "write failed for '" + path + "'");
}

namespace {

// Byte-order guard: all formats here are little-endian on disk, and the
// in-memory scalar layout is memcpy'd directly.
static_assert(std::endian::native == std::endian::little,
              "bonnet I/O assumes a little-endian host");

std::string manifest_path(const std::string& path) { return path + ".json"; }

void write_rawz_impl(const std::string& path, const VolumeMeta& meta, const void* payload,
                     size_t payload_bytes) {
    meta.validate();
    nlohmann::json j;
    j["shape"] = meta.shape;
    j["spacing_mm"] = meta.spacing_mm;
    j["kind"] = value_kind_name(meta.kind);
    const std::string text = j.dump(2) + "\n";
    write_file_bytes(manifest_path(path), text.data(), text.size());
    write_file_bytes(path, payload, payload_bytes);
}

VolumeMeta parse_manifest(const std::string& path) {
    std::ifstream in(manifest_path(path));
    require(bool(in), Err::ManifestMissing, "no manifest '" + manifest_path(path) + "'");
    nlohmann::json j;
    try {
        in >> j;
        VolumeMeta meta;
        for (int d = 0; d < 3; ++d) meta.shape[size_t(d)] = j.at("shape").at(size_t(d)).get<int32_t>();
        for (int d = 0; d < 3; ++d)
            meta.spacing_mm[size_t(d)] = j.at("spacing_mm").at(size_t(d)).get<double>();
        meta.kind = value_kind_from_name(j.at("kind").get<std::string>());
        meta.validate();
        return meta;
    } catch (const nlohmann::json::exception& e) {
        fail(Err::IoError, "manifest '" + manifest_path(path) + "': " + e.what());
    }
}

template <typename T>
Volume<T> read_rawz_impl(const std::string& path, ValueKind expected) {
    VolumeMeta meta = parse_manifest(path);
    require(meta.kind == expected, Err::UnknownKind,
            std::string("manifest kind is ") + value_kind_name(meta.kind) + ", expected " +
                value_kind_name(expected));
    const std::vector<unsigned char> bytes = read_file_bytes(path);
    const size_t want = size_t(meta.voxel_count()) * sizeof(T);
    require(bytes.size() == want, Err::SizeMismatch,
            "payload is " + std::to_string(bytes.size()) + " bytes, shape needs " +
                std::to_string(want));
    Volume<T> v;
    v.meta = meta;
    v.data.resize(size_t(meta.voxel_count()));
    std::memcpy(v.data.data(), bytes.data(), want);
    return v;
}

} // namespace

void write_rawz(const std::string& path, const HuVolume& volume) {
    volume.check_consistent();
    require(volume.meta.kind == ValueKind::HuI16, Err::UnknownKind, "HU volume kind must be hu_i16");
    write_rawz_impl(path, volume.meta, volume.data.data(), volume.data.size() * sizeof(int16_t));
}

void write_rawz(const std::string& path, const LabelVolume& volume) {
    volume.check_consistent();
    require(volume.meta.kind == ValueKind::LabelsU16, Err::UnknownKind,
            "label volume kind must be labels_u16");
    write_rawz_impl(path, volume.meta, volume.data.data(), volume.data.size() * sizeof(uint16_t));
}

VolumeMeta read_rawz_meta(const std::string& path) { return parse_manifest(path); }

HuVolume read_rawz_hu(const std::string& path) {
    return read_rawz_impl<int16_t>(path, ValueKind::HuI16);
}

LabelVolume read_rawz_labels(const std::string& path) {
    return read_rawz_impl<uint16_t>(path, ValueKind::LabelsU16);
}

void export_mask(const std::string& path, const LabelVolume& mask) { write_rawz(path, mask); }

// ---------------------------------------------------------------------------
// NIfTI-1
// ---------------------------------------------------------------------------

namespace {

bool looks_gzipped(const std::vector<unsigned char>& bytes) {
    return bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b;
}

std::vector<unsigned char> gunzip(const std::vector<unsigned char>& in) {
    z_stream zs{};
    require(inflateInit2(&zs, 15 + 16) == Z_OK, Err::IoError, "zlib init failed");
    std::vector<unsigned char> out;
    out.reserve(in.size() * 4);
    unsigned char buf[1 << 16];
    zs.next_in = const_cast<unsigned char*>(in.data());
    zs.avail_in = uInt(in.size());
    int rc = Z_OK;
    do {
        zs.next_out = buf;
        zs.avail_out = sizeof(buf);
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            fail(Err::IoError, "gzip stream is corrupt");
        }
        out.insert(out.end(), buf, buf + (sizeof(buf) - zs.avail_out));
    } while (rc != Z_STREAM_END);
    inflateEnd(&zs);
    return out;
}

template <typename T>
T read_le(const std::vector<unsigned char>& bytes, size_t offset) {
    T v;
    std::memcpy(&v, bytes.data() + offset, sizeof(T));
    return v;
}

} // namespace

HuVolume read_nifti1(const std::string& path) {
    std::vector<unsigned char> bytes = read_file_bytes(path);
    if (looks_gzipped(bytes)) bytes = gunzip(bytes);
    require(bytes.size() >= 352, Err::TruncatedFile, "file shorter than a NIfTI-1 header");

    char magic[4];
    std::memcpy(magic, bytes.data() + 344, 4);
    require(std::memcmp(magic, "n+1\0", 4) == 0, Err::BadMagic,
            "not a single-file NIfTI-1 image (magic != \"n+1\\0\")");

    const int16_t ndim = read_le<int16_t>(bytes, 40);
    require(ndim >= 1 && ndim <= 7, Err::UnsupportedDim,
            "dim[0] out of range; big-endian NIfTI is not supported");
    require(ndim == 3, Err::UnsupportedDim, "only 3-D images are supported");

    const int16_t datatype = read_le<int16_t>(bytes, 70);
    require(datatype == 4 || datatype == 16, Err::UnsupportedDatatype,
            "datatype " + std::to_string(datatype) + " unsupported (need 4 or 16)");

    VolumeMeta meta;
    meta.kind = ValueKind::HuI16;
    for (int d = 0; d < 3; ++d) {
        meta.shape[size_t(d)] = read_le<int16_t>(bytes, 42 + 2 * size_t(d));
        const float pd = read_le<float>(bytes, 80 + 4 * size_t(d));
        meta.spacing_mm[size_t(d)] = pd > 0.0f ? double(pd) : 1.0;
    }
    meta.validate();

    float slope = read_le<float>(bytes, 112);
    const float inter = read_le<float>(bytes, 116);
    if (slope == 0.0f) slope = 1.0f;

    const auto vox_offset = int64_t(std::llround(read_le<float>(bytes, 108)));
    require(vox_offset >= 348, Err::IoError, "vox_offset points inside the header");

    const int64_t n = meta.voxel_count();
    const size_t elem = datatype == 4 ? 2 : 4;
    require(int64_t(bytes.size()) >= vox_offset + n * int64_t(elem), Err::TruncatedFile,
            "image data shorter than dim product");

    HuVolume volume;
    volume.meta = meta;
    volume.data.resize(size_t(n));
    const unsigned char* src = bytes.data() + vox_offset;
    for (int64_t i = 0; i < n; ++i) {
        double stored;
        if (datatype == 4) {
            int16_t v;
            std::memcpy(&v, src + size_t(i) * 2, 2);
            stored = double(v);
        } else {
            float v;
            std::memcpy(&v, src + size_t(i) * 4, 4);
            stored = double(v);
        }
        const double hu = std::round(stored * double(slope) + double(inter));
        volume.data[size_t(i)] = int16_t(std::clamp(hu, -32768.0, 32767.0));
    }
    return volume;
}

// ---------------------------------------------------------------------------
// BNC1 sparse cache
// ---------------------------------------------------------------------------

namespace {

void append(std::vector<unsigned char>& buf, const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    buf.insert(buf.end(), p, p + len);
}

template <typename T>
void append_scalar(std::vector<unsigned char>& buf, T v) {
    append(buf, &v, sizeof(T));
}

template <typename T>
T take(const std::vector<unsigned char>& bytes, size_t& cursor) {
    require(cursor + sizeof(T) <= bytes.size(), Err::TruncatedFile, "cache file ends early");
    T v;
    std::memcpy(&v, bytes.data() + cursor, sizeof(T));
    cursor += sizeof(T);
    return v;
}

} // namespace

void write_cache(const std::string& path, const SparseTensorF& st) {
    st.check_consistent();
    require(st.features.cols >= 1 || st.size() == 0, Err::ShapeMismatch,
            "nonempty tensor needs at least one channel");

    std::vector<unsigned char> buf;
    append(buf, "BNC1", 4);
    append_scalar<uint32_t>(buf, 1);
    append_scalar<uint8_t>(buf, st.labels ? 1 : 0);
    append_scalar<uint64_t>(buf, uint64_t(st.size()));
    append_scalar<uint32_t>(buf, uint32_t(st.channels()));
    for (const VoxelCoord& c : st.coords) {
        append_scalar<int32_t>(buf, c.x);
        append_scalar<int32_t>(buf, c.y);
        append_scalar<int32_t>(buf, c.z);
    }
    append(buf, st.features.data.data(), st.features.data.size() * sizeof(float));
    if (st.labels) append(buf, st.labels->data(), st.labels->size() * sizeof(uint16_t));
    append_scalar<uint64_t>(buf, fnv1a64(buf.data(), buf.size()));
    write_file_bytes(path, buf.data(), buf.size());
}

SparseTensorF read_cache(const std::string& path) {
    const std::vector<unsigned char> bytes = read_file_bytes(path);
    require(bytes.size() >= 29, Err::TruncatedFile, "cache file shorter than its fixed fields");

    size_t cursor = 0;
    char magic[4];
    std::memcpy(magic, bytes.data(), 4);
    cursor += 4;
    require(std::memcmp(magic, "BNC1", 4) == 0, Err::BadMagic, "not a BNC1 cache file");
    const auto version = take<uint32_t>(bytes, cursor);
    require(version == 1, Err::VersionMismatch, "cache version " + std::to_string(version));
    const auto has_labels = take<uint8_t>(bytes, cursor);
    require(has_labels <= 1, Err::IoError, "label flag must be 0 or 1");
    const auto n = take<uint64_t>(bytes, cursor);
    const auto c = take<uint32_t>(bytes, cursor);

    const size_t body = bytes.size() - 8;
    // per-row byte count; divide rather than multiply so a garbage N cannot
    // overflow the size arithmetic
    const uint64_t per_row = 12 + uint64_t(c) * 4 + (has_labels ? 2 : 0);
    require(n <= (uint64_t(body) - cursor) / per_row || n == 0, Err::TruncatedFile,
            "cache payload shorter than the header promises");
    const size_t want = cursor + size_t(n * per_row);
    require(body >= want, Err::TruncatedFile, "cache payload shorter than the header promises");
    require(body == want, Err::SizeMismatch, "cache payload longer than the header promises");

    // structure first (truncation diagnoses precisely), checksum second
    // (in-place corruption anywhere else)
    const uint64_t stored_sum = read_le<uint64_t>(bytes, bytes.size() - 8);
    const uint64_t actual_sum = fnv1a64(bytes.data(), bytes.size() - 8);
    require(stored_sum == actual_sum, Err::ChecksumMismatch, "cache checksum does not match");

    SparseTensorF st;
    st.coords.resize(size_t(n));
    for (auto& coord : st.coords) {
        coord.x = take<int32_t>(bytes, cursor);
        coord.y = take<int32_t>(bytes, cursor);
        coord.z = take<int32_t>(bytes, cursor);
    }
    st.features = Matrix<float>(int64_t(n), int64_t(c));
    std::memcpy(st.features.data.data(), bytes.data() + cursor, size_t(n) * c * 4);
    cursor += size_t(n) * c * 4;
    if (has_labels) {
        st.labels.emplace(size_t(n));
        std::memcpy(st.labels->data(), bytes.data() + cursor, size_t(n) * 2);
        cursor += size_t(n) * 2;
    }
    st.check_consistent();
    return st;
}

} // namespace bonnet
