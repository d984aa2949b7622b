#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dg/tensor.hpp"

namespace dg {

/// n x m matrix of signs, one bit each: 1 encodes +1, 0 encodes -1.
/// Each row occupies ceil(m/64) words, LSB-first; padding bits are kept zero.
class PackedSignMatrix {
  public:
    PackedSignMatrix() = default;
    /// All bits clear (every entry -1).
    PackedSignMatrix(std::size_t rows, std::size_t cols);
    PackedSignMatrix(std::size_t rows, std::size_t cols, std::vector<std::uint64_t> words);

    static std::size_t words_for(std::size_t cols) { return (cols + 63) / 64; }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t words_per_row() const noexcept { return wpr_; }

    const std::vector<std::uint64_t>& words() const noexcept { return words_; }
    /// Mutable access for tests that corrupt padding deliberately.
    std::vector<std::uint64_t>& raw_words() noexcept { return words_; }
    const std::uint64_t* row_words(std::size_t r) const { return words_.data() + r * wpr_; }

    bool bit(std::size_t r, std::size_t c) const { return (row_words(r)[c >> 6] >> (c & 63)) & 1u; }
    /// +1.0f or -1.0f
    float sign(std::size_t r, std::size_t c) const { return bit(r, c) ? 1.0f : -1.0f; }
    void set(std::size_t r, std::size_t c, bool positive);

    /// True if every padding bit is zero.
    bool padding_clear() const;

    /// Dense +-1 tensor [rows, cols].
    Tensor unpack() const;
    /// Packs a tensor of +-1 (anything > 0 or == 0 maps to +1, < 0 to -1).
    static PackedSignMatrix pack(const Tensor& signs);

    friend bool operator==(const PackedSignMatrix&, const PackedSignMatrix&) = default;

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::size_t wpr_ = 0;
    std::vector<std::uint64_t> words_;
};

/// One scaled sign plane: contributes scale * S to a weight matrix.
struct ScaledSigns {
    float scale = 0.0f;
    PackedSignMatrix signs;

    friend bool operator==(const ScaledSigns&, const ScaledSigns&) = default;
};

} // namespace dg
