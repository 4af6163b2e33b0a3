#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "cellgan/rng.hpp"
#include "cellgan/tensor.hpp"

namespace cellgan {

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
};

/// Flat, ordered collection of named parameters. Order is the registration
/// order and is the canonical order for optimizers and checkpoints.
template <typename T>
class ParamStore {
public:
    int add(const std::string& name, Tensor<T> value) {
        if (index_.count(name)) throw config_error("duplicate parameter name: " + name);
        int id = static_cast<int>(params_.size());
        Tensor<T> grad(value.shape());
        params_.push_back(Parameter<T>{name, std::move(value), std::move(grad)});
        index_[name] = id;
        return id;
    }

    int find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? -1 : it->second;
    }

    size_t count() const { return params_.size(); }
    size_t total_elements() const {
        size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    Parameter<T>& at(int id) { return params_.at(static_cast<size_t>(id)); }
    const Parameter<T>& at(int id) const { return params_.at(static_cast<size_t>(id)); }

    void zero_grads() {
        for (auto& p : params_) p.grad.fill(T(0));
    }

    /// Deep copy of all values (used for EMA shadows and checkpoints).
    ParamStore clone() const {
        ParamStore c;
        for (const auto& p : params_) c.add(p.name, p.value.clone());
        return c;
    }

private:
    std::vector<Parameter<T>> params_;
    std::unordered_map<std::string, int> index_;
};

/// He-style normal init for convolution/linear weights (fan_in mode).
template <typename T>
inline Tensor<T> he_normal(std::vector<int> shape, int fan_in, Rng& rng, double gain = 1.0) {
    Tensor<T> t(std::move(shape));
    rng.fill_normal(t, 0.0, gain * std::sqrt(2.0 / std::max(1, fan_in)));
    return t;
}

template <typename T>
inline Tensor<T> normal_init(std::vector<int> shape, double stddev, Rng& rng) {
    Tensor<T> t(std::move(shape));
    rng.fill_normal(t, 0.0, stddev);
    return t;
}

}  // namespace cellgan
