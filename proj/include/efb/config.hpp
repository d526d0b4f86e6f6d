#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

namespace efb {

/// Linear noise variance for a transmit power P and an SNR in dB.
inline double noise_variance(double power, double snr_db) {
  if (power <= 0.0) {
    throw std::invalid_argument("noise_variance: power must be positive");
  }
  return power * std::pow(10.0, -snr_db / 10.0);
}

/// All scalar system constants of the downlink. Antennas are grouped into
/// K contiguous subarrays of N_m = N_t / K elements, one per RF chain.
struct SystemConfig {
  int n_antennas = 64;        // N_t
  int n_users = 2;            // K, also the number of RF chains
  int n_pilots = 8;           // L
  int n_bits = 10;            // B, feedback budget per user
  int n_paths = 2;            // L_path
  double power = 1.0;         // P, linear watts
  double snr_db = 10.0;
  double spacing_ratio = 0.5; // element spacing d / wavelength

  int n_per_subarray() const { return n_antennas / n_users; }
  double noise_var() const { return noise_variance(power, snr_db); }

  void validate() const {
    if (n_antennas < 1 || n_users < 1 || n_pilots < 1 || n_bits < 1 || n_paths < 1) {
      throw std::invalid_argument("SystemConfig: all counts must be >= 1");
    }
    if (n_antennas % n_users != 0) {
      throw std::invalid_argument("SystemConfig: N_t must be divisible by K (N_m = N_t / K)");
    }
    if (power <= 0.0) {
      throw std::invalid_argument("SystemConfig: power must be positive");
    }
    if (spacing_ratio <= 0.0) {
      throw std::invalid_argument("SystemConfig: spacing ratio must be positive");
    }
  }
};

}  // namespace efb
