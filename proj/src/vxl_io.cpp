#include "dinocomplete/volume.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace dinocomplete {
namespace {

constexpr char kMagic[4] = {'V', 'X', 'L', '1'};
constexpr std::size_t kHeaderBytes = 4 + 6 * 4;
constexpr std::uint32_t kDtypeFloat32 = 0;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

const char* to_string(VxlErrorCode code) {
    switch (code) {
        case VxlErrorCode::Io: return "io";
        case VxlErrorCode::BadMagic: return "bad_magic";
        case VxlErrorCode::BadKind: return "bad_kind";
        case VxlErrorCode::UnsupportedDtype: return "unsupported_dtype";
        case VxlErrorCode::DimensionMismatch: return "dimension_mismatch";
        case VxlErrorCode::TruncatedPayload: return "truncated_payload";
        case VxlErrorCode::TrailingData: return "trailing_data";
    }
    return "unknown";
}

std::vector<std::uint8_t> encode_vxl(const VxlArray& array) {
    if (array.data.size() != array.expected_size()) {
        throw VxlError(VxlErrorCode::DimensionMismatch,
                       "VXL1 payload size does not match declared dimensions");
    }
    std::vector<std::uint8_t> out;
    out.reserve(kHeaderBytes + 4 * array.data.size());
    out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
    put_u32(out, static_cast<std::uint32_t>(array.kind));
    put_u32(out, array.channels);
    put_u32(out, array.depth);
    put_u32(out, array.height);
    put_u32(out, array.width);
    put_u32(out, kDtypeFloat32);
    for (float f : array.data) put_u32(out, std::bit_cast<std::uint32_t>(f));
    return out;
}

VxlArray decode_vxl(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw VxlError(VxlErrorCode::BadMagic, "not a VXL1 file (bad magic)");
    }
    if (bytes.size() < kHeaderBytes) {
        throw VxlError(VxlErrorCode::TruncatedPayload, "VXL1 header is truncated");
    }
    const std::uint8_t* p = bytes.data() + 4;
    VxlArray a;
    const std::uint32_t kind = get_u32(p);
    if (kind > 2) throw VxlError(VxlErrorCode::BadKind, "VXL1 kind must be 0, 1 or 2");
    a.kind = static_cast<VolumeKind>(kind);
    a.channels = get_u32(p + 4);
    a.depth = get_u32(p + 8);
    a.height = get_u32(p + 12);
    a.width = get_u32(p + 16);
    if (get_u32(p + 20) != kDtypeFloat32) {
        throw VxlError(VxlErrorCode::UnsupportedDtype, "VXL1 dtype must be 0 (float32)");
    }
    if (a.channels == 0 || a.depth == 0 || a.height == 0 || a.width == 0) {
        throw VxlError(VxlErrorCode::DimensionMismatch, "VXL1 header has a zero dimension");
    }
    if (a.kind != VolumeKind::Feature && a.channels != 1) {
        throw VxlError(VxlErrorCode::DimensionMismatch,
                       "VXL1 tsdf/mask volumes must have exactly one channel");
    }
    const std::size_t n = a.expected_size();
    const std::size_t payload = bytes.size() - kHeaderBytes;
    if (payload < 4 * n) {
        throw VxlError(VxlErrorCode::TruncatedPayload,
                       "VXL1 payload holds " + std::to_string(payload) + " bytes, header needs " +
                           std::to_string(4 * n));
    }
    if (payload > 4 * n) {
        throw VxlError(VxlErrorCode::TrailingData, "VXL1 file has bytes past the payload");
    }
    a.data.resize(n);
    const std::uint8_t* q = bytes.data() + kHeaderBytes;
    for (std::size_t i = 0; i < n; ++i) a.data[i] = std::bit_cast<float>(get_u32(q + 4 * i));
    return a;
}

void write_vxl(const std::filesystem::path& path, const VxlArray& array) {
    const auto bytes = encode_vxl(array);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw VxlError(VxlErrorCode::Io, "cannot open for writing: " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw VxlError(VxlErrorCode::Io, "write failed: " + path.string());
}

VxlArray read_vxl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw VxlError(VxlErrorCode::Io, "cannot open for reading: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return decode_vxl(bytes);
}

namespace {

VxlArray cubic(VolumeKind kind, std::uint32_t channels, const GridSpec& spec,
               const std::vector<float>& values) {
    VxlArray a;
    a.kind = kind;
    a.channels = channels;
    a.depth = a.height = a.width = static_cast<std::uint32_t>(spec.edge);
    a.data = values;
    return a;
}

void require_cubic(const VxlArray& a, int edge) {
    if (a.depth != a.height || a.height != a.width) {
        throw VxlError(VxlErrorCode::DimensionMismatch, "volume is not cubic");
    }
    if (edge > 0 && static_cast<int>(a.depth) != edge) {
        throw VxlError(VxlErrorCode::DimensionMismatch,
                       "volume edge " + std::to_string(a.depth) + " but expected " +
                           std::to_string(edge));
    }
}

void require_kind(const VxlArray& a, VolumeKind kind) {
    if (a.kind != kind) throw VxlError(VxlErrorCode::BadKind, "unexpected VXL1 volume kind");
}

}  // namespace

void write_volume(const std::filesystem::path& path, const TsdfVolume& vol) {
    write_vxl(path, cubic(VolumeKind::Tsdf, 1, vol.spec, vol.values));
}

void write_volume(const std::filesystem::path& path, const FeatureVolume& vol) {
    write_vxl(path, cubic(VolumeKind::Feature, static_cast<std::uint32_t>(vol.channels),
                          vol.spec, vol.values));
}

void write_volume(const std::filesystem::path& path, const MaskVolume& vol) {
    write_vxl(path, cubic(VolumeKind::Mask, 1, vol.spec, vol.values));
}

void write_volume(const std::filesystem::path& path, const Volume& vol) {
    std::visit([&](const auto& v) { write_volume(path, v); }, vol);
}

Volume read_volume(const std::filesystem::path& path, const GridSpec& base) {
    VxlArray a = read_vxl(path);
    require_cubic(a, 0);
    const GridSpec spec = base.with_edge(static_cast<int>(a.depth));
    switch (a.kind) {
        case VolumeKind::Tsdf: {
            TsdfVolume v;
            v.spec = spec;
            v.values = std::move(a.data);
            return v;
        }
        case VolumeKind::Feature: {
            FeatureVolume v;
            v.spec = spec;
            v.channels = static_cast<int>(a.channels);
            v.values = std::move(a.data);
            return v;
        }
        case VolumeKind::Mask: {
            MaskVolume v;
            v.spec = spec;
            v.values = std::move(a.data);
            return v;
        }
    }
    throw VxlError(VxlErrorCode::BadKind, "unexpected VXL1 volume kind");
}

TsdfVolume read_tsdf(const std::filesystem::path& path, const GridSpec& spec) {
    VxlArray a = read_vxl(path);
    require_kind(a, VolumeKind::Tsdf);
    require_cubic(a, spec.edge);
    TsdfVolume v;
    v.spec = spec;
    v.values = std::move(a.data);
    return v;
}

FeatureVolume read_features(const std::filesystem::path& path, const GridSpec& spec) {
    VxlArray a = read_vxl(path);
    require_kind(a, VolumeKind::Feature);
    require_cubic(a, spec.edge);
    FeatureVolume v;
    v.spec = spec;
    v.channels = static_cast<int>(a.channels);
    v.values = std::move(a.data);
    return v;
}

MaskVolume read_mask(const std::filesystem::path& path, const GridSpec& spec) {
    VxlArray a = read_vxl(path);
    require_kind(a, VolumeKind::Mask);
    require_cubic(a, spec.edge);
    MaskVolume v;
    v.spec = spec;
    v.values = std::move(a.data);
    return v;
}

}  // namespace dinocomplete
