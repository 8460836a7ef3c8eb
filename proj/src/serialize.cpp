#include "hattn/serialize.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little, "HTSR writer assumes a little-endian host");

namespace hattn {

namespace {
constexpr char kMagic[4] = {'H', 'T', 'S', 'R'};
}

void write_htsr(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_htsr: cannot open " + path.string());
  f.write(kMagic, 4);
  std::uint32_t rank = static_cast<std::uint32_t>(t.rank());
  f.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
  for (std::size_t i = 0; i < t.rank(); ++i) {
    std::uint64_t e = t.extent(i);
    f.write(reinterpret_cast<const char*>(&e), sizeof(e));
  }
  f.write(reinterpret_cast<const char*>(t.values().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!f) throw std::runtime_error("write_htsr: short write to " + path.string());
}

Tensor read_htsr(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_htsr: cannot open " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("read_htsr: bad magic in " + path.string());
  }
  std::uint32_t rank = 0;
  f.read(reinterpret_cast<char*>(&rank), sizeof(rank));
  if (!f || rank == 0 || rank > 8) throw std::runtime_error("read_htsr: bad rank in " + path.string());
  Shape shape(rank);
  for (auto& e : shape) {
    std::uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!f || v == 0) throw std::runtime_error("read_htsr: bad extent in " + path.string());
    e = static_cast<std::size_t>(v);
  }
  std::vector<double> values(shape_numel(shape));
  f.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!f) throw std::runtime_error("read_htsr: truncated payload in " + path.string());
  return Tensor(std::move(shape), std::move(values));
}

void write_pgm(const std::filesystem::path& path, const Tensor& map) {
  if (map.rank() != 2) throw std::invalid_argument("write_pgm: expected H x W map");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_pgm: cannot open " + path.string());
  const std::size_t h = map.extent(0), w = map.extent(1);
  f << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(w);
  auto mv = map.values();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double v = mv[y * w + x];
      v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
      row[x] = static_cast<unsigned char>(std::lround(255.0 * v));
    }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(w));
  }
  if (!f) throw std::runtime_error("write_pgm: short write to " + path.string());
}

}  // namespace hattn
