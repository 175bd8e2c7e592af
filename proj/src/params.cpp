#include "mapseg/params.hpp"

#include <cmath>

namespace mapseg {

template <typename T>
const ad::Var<T>& ParamStore<T>::create(const std::string& name, Tensor<T> init) {
    if (map_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    order_.push_back(name);
    return map_.emplace(name, ad::parameter(std::move(init))).first->second;
}

template <typename T>
const ad::Var<T>& ParamStore<T>::get(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw ConfigError("no parameter named '" + name + "'");
    return it->second;
}

template <typename T>
std::size_t ParamStore<T>::numel() const {
    std::size_t n = 0;
    for (const auto& name : order_) n += map_.at(name).value().size();
    return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
    for (auto& [name, v] : map_) v.zero_grad();
}

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double lo, double hi, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
Tensor<T> fan_in_uniform(Shape shape, int fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return uniform_tensor<T>(std::move(shape), -bound, bound, rng);
}

template class ParamStore<float>;
template class ParamStore<double>;
template Tensor<float> uniform_tensor<float>(Shape, double, double, Rng&);
template Tensor<double> uniform_tensor<double>(Shape, double, double, Rng&);
template Tensor<float> fan_in_uniform<float>(Shape, int, Rng&);
template Tensor<double> fan_in_uniform<double>(Shape, int, Rng&);

}  // namespace mapseg
