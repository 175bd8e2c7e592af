#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "mapseg/autodiff.hpp"
#include "mapseg/rng.hpp"

namespace mapseg {

/// Named trainable arrays in registration order.
template <typename T>
class ParamStore {
public:
    const ad::Var<T>& create(const std::string& name, Tensor<T> init);
    const ad::Var<T>& get(const std::string& name) const;
    bool contains(const std::string& name) const { return map_.count(name) != 0; }

    const std::vector<std::string>& names() const noexcept { return order_; }
    std::size_t size() const noexcept { return order_.size(); }
    std::size_t numel() const;
    void zero_grad();

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, ad::Var<T>> map_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
Tensor<T> fan_in_uniform(Shape shape, int fan_in, Rng& rng);

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double lo, double hi, Rng& rng);

}  // namespace mapseg
