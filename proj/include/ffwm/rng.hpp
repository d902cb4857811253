#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

namespace ffwm {

/// Mixes a seed with a list of tags into an independent stream seed.
uint64_t derive_seed(uint64_t seed, std::initializer_list<uint64_t> tags);

/// Small counter-free generator (splitmix64). Unlike the <random> distributions
/// its output is identical on every platform, which the byte-identical manifest
/// and loss-log guarantees rely on.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64();
    double uniform();                         // [0,1)
    double uniform(double lo, double hi);     // [lo,hi)
    int uniform_int(int lo, int hi);          // [lo,hi]
    double normal();
    double sign();                            // -1 or +1

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<size_t>(next_u64() % i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
};

}  // namespace ffwm
