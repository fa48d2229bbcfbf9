#include <cstring>
#include <fstream>

#include "metaformer/model.hpp"

namespace metaformer {

namespace {

constexpr char kMagic[4] = {'M', 'F', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& path, const char* what) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) {
    throw IoError(detail::cat("checkpoint ", path, ": truncated while reading ",
                              what));
  }
  return value;
}

}  // namespace

void save_checkpoint(const MetaFormer& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(detail::cat("cannot open ", path, " for writing"));
  out.write(kMagic, 4);
  write_pod(out, kVersion);
  write_pod<std::uint64_t>(out, model.config().hash());
  write_pod<std::uint32_t>(out, sizeof(scalar) * 8);
  const ParamList params = model.parameters();
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) write_pod<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(p.tensor.data().data()),
              static_cast<std::streamsize>(p.tensor.numel() * sizeof(scalar)));
  }
  if (!out) throw IoError(detail::cat("write to ", path, " failed"));
}

void load_checkpoint(MetaFormer& model, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(detail::cat("cannot open checkpoint ", path));
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError(detail::cat("checkpoint ", path, ": bad magic bytes"));
  }
  const auto version = read_pod<std::uint32_t>(in, path, "version");
  if (version != kVersion) {
    throw IoError(detail::cat("checkpoint ", path, ": unsupported version ",
                              version));
  }
  const auto file_hash = read_pod<std::uint64_t>(in, path, "config hash");
  if (file_hash != model.config().hash()) {
    throw IoError(detail::cat("checkpoint ", path, ": config hash ", file_hash,
                              " does not match model config hash ",
                              model.config().hash()));
  }
  const auto bits = read_pod<std::uint32_t>(in, path, "scalar width");
  const auto count = read_pod<std::uint32_t>(in, path, "record count");
  ParamList params = model.parameters();
  if (count != params.size()) {
    throw IoError(detail::cat("checkpoint ", path, ": has ", count,
                              " records, model has ", params.size()));
  }
  for (auto& p : params) {
    const auto name_len = read_pod<std::uint32_t>(in, path, "name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in || name != p.name) {
      throw IoError(detail::cat("checkpoint ", path, ": expected parameter '",
                                p.name, "', found '", name, "'"));
    }
    const auto rank = read_pod<std::uint32_t>(in, path, "rank");
    if (rank != p.tensor.rank()) {
      throw IoError(detail::cat("checkpoint ", path, ": rank mismatch on ",
                                p.name));
    }
    for (std::size_t d = 0; d < rank; ++d) {
      const auto dim = read_pod<std::uint64_t>(in, path, "dims");
      if (static_cast<std::int64_t>(dim) != p.tensor.shape()[d]) {
        throw IoError(detail::cat("checkpoint ", path, ": shape mismatch on ",
                                  p.name));
      }
    }
    auto dst = p.tensor.mutable_data();
    if (bits == sizeof(scalar) * 8) {
      in.read(reinterpret_cast<char*>(dst.data()),
              static_cast<std::streamsize>(dst.size() * sizeof(scalar)));
      if (!in) {
        throw IoError(detail::cat("checkpoint ", path, ": truncated payload on ",
                                  p.name));
      }
    } else if (bits == 32 && sizeof(scalar) == 8) {
      // widening a speed-run checkpoint into the default build is exact
      std::vector<float> tmp(dst.size());
      in.read(reinterpret_cast<char*>(tmp.data()),
              static_cast<std::streamsize>(tmp.size() * sizeof(float)));
      if (!in) {
        throw IoError(detail::cat("checkpoint ", path, ": truncated payload on ",
                                  p.name));
      }
      for (std::size_t i = 0; i < tmp.size(); ++i)
        dst[i] = static_cast<scalar>(tmp[i]);
    } else {
      throw IoError(detail::cat("checkpoint ", path, ": ", bits,
                                "-bit payload cannot load into this ",
                                sizeof(scalar) * 8, "-bit build"));
    }
  }
}

}  // namespace metaformer
