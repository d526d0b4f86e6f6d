#pragma once

#include <Eigen/Dense>
#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "efb/config.hpp"
#include "efb/rng.hpp"

namespace efb {

using cxd = std::complex<double>;

/// ULA steering vector: entry m is exp(j 2*pi*(d/lambda)*m*sin(phi)).
Eigen::VectorXcd array_response(double phi, int n, double d_over_lambda);

/// Subarray connector C = I_K kron 1_{N_m}, an N_t x K 0/1 matrix that wires
/// each antenna to exactly one RF chain.
Eigen::MatrixXd antenna_connector(int n_users, int n_per_subarray);

/// One downlink draw: channels row k holds h_k (conjugation is applied at the
/// point of use where h_k^H is required), plus the generating path parameters.
struct ChannelRealization {
  Eigen::MatrixXcd channels;  // K x N_t, row k = h_k
  Eigen::MatrixXcd gains;     // L_path x K, alpha_{p,k}
  Eigen::MatrixXd aods;       // L_path x K, phi_{p,k} in radians
};

/// Clustered Saleh-Valenzuela draw: per user, L_path i.i.d. CN(0,1) gains and
/// AoDs uniform on [-pi/2, pi/2]; h_k = (1/L_path) sum_p alpha_{p,k} a_t(phi_{p,k}).
ChannelRealization sample_channel(const SystemConfig& cfg, Rng& rng);

/// `count` independent draws. Each realization uses its own substream of
/// `rng` keyed by index, so the batch may be generated in any order (or in
/// parallel) without changing the result.
std::vector<ChannelRealization> sample_batch(const SystemConfig& cfg, const Rng& rng, int count);

/// Binary dataset dump. Layout (all little-endian):
///   magic "EFBCH1" | u32 N_t | u32 K | u32 L_path | u64 count | u64 seed
///   count * (K * N_t) complex64 channel entries, row-major per realization
///   count path blocks: L_path*K complex64 gains then L_path*K float32 AoDs,
///   both row-major (path-major, user-minor)
void write_channel_dataset(const std::string& path, const SystemConfig& cfg,
                           std::uint64_t seed, const std::vector<ChannelRealization>& data);

struct ChannelDatasetHeader {
  std::uint32_t n_antennas = 0;
  std::uint32_t n_users = 0;
  std::uint32_t n_paths = 0;
  std::uint64_t count = 0;
  std::uint64_t seed = 0;
};

std::vector<ChannelRealization> read_channel_dataset(const std::string& path,
                                                     ChannelDatasetHeader* header = nullptr);

}  // namespace efb
