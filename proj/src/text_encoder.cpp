#include "pgat/text_encoder.hpp"

#include <cctype>
#include <cmath>
#include <map>

#include "pgat/errors.hpp"
#include "pgat/rng.hpp"

namespace pgat {

TextEncoder::TextEncoder() {
    Rng rng(kProjectionSeed);
    projection_.resize(size_t(kHashBuckets) * kTextDim);
    for (auto& v : projection_) v = rng.uniform(-1.0, 1.0);
}

std::vector<std::string> TextEncoder::tokenize(const std::string& text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char ch : text) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            if (!cur.empty()) {
                tokens.push_back(cur);
                cur.clear();
            }
        } else {
            cur.push_back(char(std::tolower(c)));
        }
    }
    if (!cur.empty()) tokens.push_back(cur);
    return tokens;
}

int TextEncoder::bucket_of(const std::string& token) {
    return int(fnv1a64(token) % uint64_t(kHashBuckets));
}

std::vector<double> TextEncoder::encode(const std::string& text) const {
    auto tokens = tokenize(text);
    if (tokens.empty()) throw ValidationError("cannot encode empty prompt text");
    ++calls_;

    std::map<int, double> counts;
    for (const auto& t : tokens) counts[bucket_of(t)] += 1.0;

    std::vector<double> e(kTextDim, 0.0);
    for (const auto& [bucket, count] : counts) {
        const double* row = &projection_[size_t(bucket) * kTextDim];
        for (int d = 0; d < kTextDim; ++d) e[size_t(d)] += count * row[d];
    }
    double norm2 = 0.0;
    for (double v : e) norm2 += v * v;
    double norm = std::sqrt(norm2);
    if (norm < 1e-12) throw std::runtime_error("degenerate text embedding for: " + text);
    for (double& v : e) v /= norm;
    return e;
}

}  // namespace pgat
