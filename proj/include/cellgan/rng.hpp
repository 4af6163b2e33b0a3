#pragma once

#include <cstdint>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>
#include <string>

#include "cellgan/tensor.hpp"

namespace cellgan {

/// Deterministic random source. One instance drives one logical stream;
/// state round-trips through text so checkpoints can resume bit-exactly.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    uint64_t raw() { return engine_(); }

    /// Uniform in [0, n).
    int uniform_int(int n) {
        return static_cast<int>(engine_() % static_cast<uint64_t>(n));
    }

    double uniform(double lo = 0.0, double hi = 1.0) {
        // 53-bit mantissa draw; avoids distribution implementation differences
        double u = static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0);
        return lo + u * (hi - lo);
    }

    double normal() {
        // Box-Muller on explicit uniform draws keeps the stream layout fixed
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void fill_normal(Tensor<T>& t, double mean = 0.0, double stddev = 1.0) {
        for (size_t i = 0; i < t.size(); ++i)
            t[i] = static_cast<T>(mean + stddev * normal());
    }

    template <typename T>
    void fill_uniform(Tensor<T>& t, double lo, double hi) {
        for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(uniform(lo, hi));
    }

    /// Independent child stream; used to give submodules stable seeds.
    Rng split() { return Rng(engine_() ^ 0x9e3779b97f4a7c15ULL); }

    std::string save_state() const {
        std::ostringstream ss;
        ss << std::setprecision(std::numeric_limits<double>::max_digits10);
        ss << engine_ << ' ' << (have_spare_ ? 1 : 0) << ' ' << spare_;
        return ss.str();
    }

    void load_state(const std::string& s) {
        std::istringstream ss(s);
        int hs = 0;
        ss >> engine_ >> hs >> spare_;
        if (ss.fail()) throw domain_error("rng: malformed state string");
        have_spare_ = hs != 0;
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace cellgan
