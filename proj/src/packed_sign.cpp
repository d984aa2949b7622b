#include "dg/packed_sign.hpp"

#include "dg/error.hpp"

namespace dg {

PackedSignMatrix::PackedSignMatrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), wpr_(words_for(cols)), words_(rows * wpr_, 0) {}

PackedSignMatrix::PackedSignMatrix(std::size_t rows, std::size_t cols, std::vector<std::uint64_t> words)
    : rows_(rows), cols_(cols), wpr_(words_for(cols)), words_(std::move(words)) {
    if (words_.size() != rows_ * wpr_) throw InputError("packed sign matrix: word count does not match shape");
}

void PackedSignMatrix::set(std::size_t r, std::size_t c, bool positive) {
    auto& w = words_[r * wpr_ + (c >> 6)];
    auto m = std::uint64_t{1} << (c & 63);
    w = positive ? (w | m) : (w & ~m);
}

bool PackedSignMatrix::padding_clear() const {
    std::size_t used = cols_ & 63;
    if (used == 0) return true;
    std::uint64_t pad = ~((std::uint64_t{1} << used) - 1);
    for (std::size_t r = 0; r < rows_; ++r)
        if (row_words(r)[wpr_ - 1] & pad) return false;
    return true;
}

Tensor PackedSignMatrix::unpack() const {
    Tensor t({rows_, cols_});
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t[r * cols_ + c] = sign(r, c);
    return t;
}

PackedSignMatrix PackedSignMatrix::pack(const Tensor& signs) {
    if (signs.rank() != 2) throw InputError("sign: expected a 2-D tensor");
    PackedSignMatrix p(signs.dim(0), signs.dim(1));
    for (std::size_t r = 0; r < p.rows_; ++r) {
        auto row = signs.row(r);
        auto* w = p.words_.data() + r * p.wpr_;
        for (std::size_t c = 0; c < p.cols_; ++c)
            if (!(row[c] < 0.0f)) w[c >> 6] |= std::uint64_t{1} << (c & 63);
    }
    return p;
}

} // namespace dg
