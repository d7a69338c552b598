#include "tpmamba/volume_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>

namespace tpmamba {

static_assert(std::endian::native == std::endian::little, "RVOL and checkpoint IO assume a little-endian host");

namespace fs = std::filesystem;

void VolumeRecord::validate() const {
  if (voxels.rank() != 3) throw InputError(id + ": voxels must be [D, H, W], got " + shape_str(voxels.shape()));
  for (double s : spacing) {
    if (!(s > 0) || !std::isfinite(s)) throw InputError(id + ": spacing must be positive");
  }
  if (labels && labels->shape() != voxels.shape()) {
    throw InputError(id + ": label grid " + shape_str(labels->shape()) + " differs from voxels " +
                     shape_str(voxels.shape()));
  }
}

namespace {

constexpr char kMagic[4] = {'R', 'V', 'O', 'L'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const fs::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw InputError(path.string() + ": truncated RVOL header");
  return v;
}

std::size_t voxel_bytes(VoxelType t) {
  switch (t) {
    case VoxelType::u8: return 1;
    case VoxelType::i16: return 2;
    case VoxelType::f32: return 4;
  }
  return 0;
}

void write_header(std::ostream& os, const std::array<Index, 3>& dims, const std::array<double, 3>& spacing,
                  VoxelType dtype) {
  os.write(kMagic, 4);
  for (Index d : dims) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  for (double s : spacing) put<float>(os, static_cast<float>(s));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  return os;
}

}  // namespace

void write_rvol(const fs::path& path, const Tensor<float>& data, const std::array<double, 3>& spacing,
                VoxelType dtype) {
  if (data.rank() != 3) throw DimensionError("write_rvol: expected [D, H, W], got " + shape_str(data.shape()));
  std::ofstream os = open_out(path);
  write_header(os, {data.dim(0), data.dim(1), data.dim(2)}, spacing, dtype);
  switch (dtype) {
    case VoxelType::f32:
      os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * 4));
      break;
    case VoxelType::i16:
      for (Index i = 0; i < data.size(); ++i) {
        put<std::int16_t>(os, static_cast<std::int16_t>(std::clamp(std::lround(data[i]), -32768L, 32767L)));
      }
      break;
    case VoxelType::u8:
      for (Index i = 0; i < data.size(); ++i) {
        put<std::uint8_t>(os, static_cast<std::uint8_t>(std::clamp(std::lround(data[i]), 0L, 255L)));
      }
      break;
  }
  if (!os) throw InputError("write failed: " + path.string());
}

void write_rvol(const fs::path& path, const LabelMap& labels, const std::array<double, 3>& spacing) {
  if (labels.rank() != 3) throw DimensionError("write_rvol: expected [D, H, W], got " + shape_str(labels.shape()));
  std::ofstream os = open_out(path);
  write_header(os, {labels.dim(0), labels.dim(1), labels.dim(2)}, spacing, VoxelType::u8);
  os.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
  if (!os) throw InputError("write failed: " + path.string());
}

RvolVolume read_rvol(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kMagic)) {
    throw InputError(path.string() + ": not an RVOL file");
  }
  Shape dims(3);
  for (Index& d : dims) d = get<std::uint32_t>(is, path);
  RvolVolume v;
  for (double& s : v.spacing) s = get<float>(is, path);
  const auto code = get<std::uint8_t>(is, path);
  if (code > static_cast<std::uint8_t>(VoxelType::f32)) {
    throw InputError(path.string() + ": unknown voxel type code " + std::to_string(code));
  }
  v.dtype = static_cast<VoxelType>(code);
  if (numel(dims) == 0) throw InputError(path.string() + ": empty volume " + shape_str(dims));
  const Index n = numel(dims);
  std::vector<char> raw(static_cast<std::size_t>(n) * voxel_bytes(v.dtype));
  if (!is.read(raw.data(), static_cast<std::streamsize>(raw.size()))) {
    throw InputError(path.string() + ": truncated voxel data");
  }
  v.data = Tensor<float>(dims);
  for (Index i = 0; i < n; ++i) {
    switch (v.dtype) {
      case VoxelType::u8: v.data[i] = static_cast<unsigned char>(raw[i]); break;
      case VoxelType::i16: {
        std::int16_t x;
        std::memcpy(&x, raw.data() + 2 * i, 2);
        v.data[i] = x;
        break;
      }
      case VoxelType::f32: std::memcpy(&v.data[i], raw.data() + 4 * i, 4); break;
    }
  }
  return v;
}

LabelMap read_rvol_labels(const fs::path& path) {
  const RvolVolume v = read_rvol(path);
  if (v.dtype != VoxelType::u8) throw InputError(path.string() + ": label volumes must be u8");
  LabelMap out(v.data.shape());
  for (Index i = 0; i < out.size(); ++i) out[i] = static_cast<std::uint8_t>(v.data[i]);
  return out;
}

std::vector<DatasetEntry> list_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw InputError("dataset directory not found: " + dir.string());
  const std::string image_suffix = "_image.rvol";
  std::vector<DatasetEntry> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.size() <= image_suffix.size() || !name.ends_with(image_suffix)) continue;
    DatasetEntry entry;
    entry.id = name.substr(0, name.size() - image_suffix.size());
    entry.image = e.path();
    const fs::path label = dir / (entry.id + "_label.rvol");
    if (fs::exists(label)) entry.label = label;
    out.push_back(std::move(entry));
  }
  std::sort(out.begin(), out.end(), [](const DatasetEntry& a, const DatasetEntry& b) { return a.id < b.id; });
  return out;
}

VolumeRecord load_record(const DatasetEntry& entry) {
  RvolVolume img = read_rvol(entry.image);
  VolumeRecord rec;
  rec.id = entry.id;
  rec.voxels = std::move(img.data);
  rec.spacing = img.spacing;
  if (entry.label) rec.labels = read_rvol_labels(*entry.label);
  rec.validate();
  return rec;
}

void save_record(const fs::path& dir, const VolumeRecord& rec) {
  rec.validate();
  write_rvol(dir / (rec.id + "_image.rvol"), rec.voxels, rec.spacing, VoxelType::f32);
  if (rec.labels) write_rvol(dir / (rec.id + "_label.rvol"), *rec.labels, rec.spacing);
}

}  // namespace tpmamba
