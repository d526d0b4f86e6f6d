#include "efb/channel.hpp"

#include <cstdio>
#include <cstring>
#include <stdexcept>

namespace efb {

Eigen::VectorXcd array_response(double phi, int n, double d_over_lambda) {
  Eigen::VectorXcd a(n);
  const double step = 2.0 * M_PI * d_over_lambda * std::sin(phi);
  for (int m = 0; m < n; ++m) {
    a(m) = std::polar(1.0, step * static_cast<double>(m));
  }
  return a;
}

Eigen::MatrixXd antenna_connector(int n_users, int n_per_subarray) {
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(
      static_cast<Eigen::Index>(n_users) * n_per_subarray, n_users);
  for (int k = 0; k < n_users; ++k) {
    c.block(static_cast<Eigen::Index>(k) * n_per_subarray, k, n_per_subarray, 1).setOnes();
  }
  return c;
}

ChannelRealization sample_channel(const SystemConfig& cfg, Rng& rng) {
  const int nt = cfg.n_antennas;
  const int k_users = cfg.n_users;
  const int lp = cfg.n_paths;

  ChannelRealization ch;
  ch.channels = Eigen::MatrixXcd::Zero(k_users, nt);
  ch.gains = Eigen::MatrixXcd(lp, k_users);
  ch.aods = Eigen::MatrixXd(lp, k_users);

  for (int k = 0; k < k_users; ++k) {
    Eigen::VectorXcd h = Eigen::VectorXcd::Zero(nt);
    for (int p = 0; p < lp; ++p) {
      const cxd alpha = rng.cnormal(1.0);
      const double phi = rng.uniform(-M_PI / 2.0, M_PI / 2.0);
      ch.gains(p, k) = alpha;
      ch.aods(p, k) = phi;
      h += alpha * array_response(phi, nt, cfg.spacing_ratio);
    }
    ch.channels.row(k) = (h / static_cast<double>(lp)).transpose();
  }
  return ch;
}

std::vector<ChannelRealization> sample_batch(const SystemConfig& cfg, const Rng& rng, int count) {
  std::vector<ChannelRealization> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng sub = rng.substream(static_cast<std::uint64_t>(i));
    out.push_back(sample_channel(cfg, sub));
  }
  return out;
}

namespace {

constexpr char kMagic[6] = {'E', 'F', 'B', 'C', 'H', '1'};

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};

template <typename T>
void write_pod(std::FILE* f, T v) {
  if (std::fwrite(&v, sizeof(T), 1, f) != 1) {
    throw std::runtime_error("channel dataset: write failed");
  }
}

template <typename T>
T read_pod(std::FILE* f) {
  T v{};
  if (std::fread(&v, sizeof(T), 1, f) != 1) {
    throw std::runtime_error("channel dataset: truncated file");
  }
  return v;
}

void write_c64(std::FILE* f, const cxd& z) {
  write_pod<float>(f, static_cast<float>(z.real()));
  write_pod<float>(f, static_cast<float>(z.imag()));
}

cxd read_c64(std::FILE* f) {
  float re = read_pod<float>(f);
  float im = read_pod<float>(f);
  return {static_cast<double>(re), static_cast<double>(im)};
}

}  // namespace

void write_channel_dataset(const std::string& path, const SystemConfig& cfg,
                           std::uint64_t seed, const std::vector<ChannelRealization>& data) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw std::runtime_error("channel dataset: cannot open " + path + " for writing");

  if (std::fwrite(kMagic, 1, sizeof(kMagic), f.get()) != sizeof(kMagic)) {
    throw std::runtime_error("channel dataset: write failed");
  }
  write_pod<std::uint32_t>(f.get(), static_cast<std::uint32_t>(cfg.n_antennas));
  write_pod<std::uint32_t>(f.get(), static_cast<std::uint32_t>(cfg.n_users));
  write_pod<std::uint32_t>(f.get(), static_cast<std::uint32_t>(cfg.n_paths));
  write_pod<std::uint64_t>(f.get(), static_cast<std::uint64_t>(data.size()));
  write_pod<std::uint64_t>(f.get(), seed);

  for (const auto& ch : data) {
    for (int k = 0; k < cfg.n_users; ++k) {
      for (int n = 0; n < cfg.n_antennas; ++n) write_c64(f.get(), ch.channels(k, n));
    }
  }
  for (const auto& ch : data) {
    for (int p = 0; p < cfg.n_paths; ++p) {
      for (int k = 0; k < cfg.n_users; ++k) write_c64(f.get(), ch.gains(p, k));
    }
    for (int p = 0; p < cfg.n_paths; ++p) {
      for (int k = 0; k < cfg.n_users; ++k) {
        write_pod<float>(f.get(), static_cast<float>(ch.aods(p, k)));
      }
    }
  }
}

std::vector<ChannelRealization> read_channel_dataset(const std::string& path,
                                                     ChannelDatasetHeader* header) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "rb"));
  if (!f) throw std::runtime_error("channel dataset: cannot open " + path);

  char magic[6];
  if (std::fread(magic, 1, sizeof(magic), f.get()) != sizeof(magic) ||
      std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("channel dataset: bad magic in " + path);
  }
  ChannelDatasetHeader h;
  h.n_antennas = read_pod<std::uint32_t>(f.get());
  h.n_users = read_pod<std::uint32_t>(f.get());
  h.n_paths = read_pod<std::uint32_t>(f.get());
  h.count = read_pod<std::uint64_t>(f.get());
  h.seed = read_pod<std::uint64_t>(f.get());
  if (header != nullptr) *header = h;

  std::vector<ChannelRealization> out(h.count);
  for (auto& ch : out) {
    ch.channels = Eigen::MatrixXcd(h.n_users, h.n_antennas);
    for (std::uint32_t k = 0; k < h.n_users; ++k) {
      for (std::uint32_t n = 0; n < h.n_antennas; ++n) ch.channels(k, n) = read_c64(f.get());
    }
  }
  for (auto& ch : out) {
    ch.gains = Eigen::MatrixXcd(h.n_paths, h.n_users);
    ch.aods = Eigen::MatrixXd(h.n_paths, h.n_users);
    for (std::uint32_t p = 0; p < h.n_paths; ++p) {
      for (std::uint32_t k = 0; k < h.n_users; ++k) ch.gains(p, k) = read_c64(f.get());
    }
    for (std::uint32_t p = 0; p < h.n_paths; ++p) {
      for (std::uint32_t k = 0; k < h.n_users; ++k) {
        ch.aods(p, k) = static_cast<double>(read_pod<float>(f.get()));
      }
    }
  }
  return out;
}

}  // namespace efb
