#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "dg/checkpoint.hpp"
#include "dg/rng.hpp"
#include "dg/tensor.hpp"

namespace dgtest {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
  public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("dg_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

  private:
    std::filesystem::path path_;
};

inline dg::Tensor random_tensor(dg::Rng& rng, dg::Shape shape, float std = 1.0f) {
    return dg::rng_normal(rng, shape, std);
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& b) {
    std::ofstream f(p, std::ios::binary);
    f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

/// Small architecture that keeps model tests fast.
inline dg::ArchConfig tiny_arch(int n_layers = 2) {
    dg::ArchConfig a;
    a.d_model = 16;
    a.n_layers = n_layers;
    a.n_heads = 2;
    a.d_ff = 32;
    a.max_seq = 64;
    return a;
}

/// Same checkpoint with every tensor perturbed by Gaussian noise.
inline dg::Checkpoint perturbed(const dg::Checkpoint& c, std::uint64_t seed, float std) {
    dg::Rng rng(seed);
    dg::Checkpoint out = c;
    for (auto& [name, t] : out.tensors) {
        auto noise = dg::rng_normal(rng, t.shape(), std);
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] += noise[i];
    }
    return out;
}

} // namespace dgtest
