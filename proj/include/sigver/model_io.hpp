#pragma once

#include <filesystem>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "sigver/error.hpp"
#include "sigver/hash.hpp"
#include "sigver/netspec.hpp"
#include "sigver/network.hpp"

namespace sigver {

inline constexpr int kModelFormatVersion = 1;

template <typename T>
nlohmann::json network_to_json(const Network<T>& net) {
  using nlohmann::json;
  json layers = json::array();
  for (const auto& L : net.layers()) {
    json j;
    j["name"] = L.spec.name;
    if (L.spec.kind == LayerKind::conv || L.spec.kind == LayerKind::dense) {
      j["weights_shape"] = L.weights.shape();
      j["weights"] = std::vector<T>(L.weights.data().begin(), L.weights.data().end());
      j["has_bias"] = L.has_bias;
      if (L.has_bias) j["bias"] = std::vector<T>(L.bias.data().begin(), L.bias.data().end());
    } else if (L.spec.kind == LayerKind::batchnorm) {
      j["gamma"] = L.bn.gamma;
      j["beta"] = L.bn.beta;
      j["running_mean"] = L.bn.running_mean;
      j["running_var"] = L.bn.running_var;
      j["momentum"] = L.bn.momentum;
      j["epsilon"] = L.bn.epsilon;
    } else {
      continue;
    }
    layers.push_back(std::move(j));
  }
  return json{{"format", "sigver-cnn"},
              {"version", kModelFormatVersion},
              {"scalar", std::is_same_v<T, float> ? "float32" : "float64"},
              {"spec", to_text(net.spec())},
              {"layers", std::move(layers)}};
}

template <typename T>
Network<T> network_from_json(const nlohmann::json& j) {
  require(j.value("format", "") == "sigver-cnn", Errc::InvalidArgument, "not a sigver CNN model file");
  require(j.contains("version") && j["version"].get<int>() == kModelFormatVersion, Errc::InvalidArgument,
          "unsupported model version");
  Network<T> net(parse_network_spec(j.at("spec").get<std::string>()), 0);
  std::size_t next = 0;
  const auto& stored = j.at("layers");
  for (auto& L : net.layers()) {
    if (L.spec.kind != LayerKind::conv && L.spec.kind != LayerKind::dense && L.spec.kind != LayerKind::batchnorm)
      continue;
    require(next < stored.size() && stored[next].at("name") == L.spec.name, Errc::InvalidArgument,
            "model file layer order does not match its spec at '" + L.spec.name + "'");
    const auto& s = stored[next++];
    auto load = [&](const char* key, std::span<T> dst) {
      const auto v = s.at(key).get<std::vector<double>>();
      require(v.size() == dst.size(), Errc::ShapeMismatch, L.spec.name + "." + key + " has the wrong length");
      for (std::size_t i = 0; i < v.size(); ++i) dst[i] = static_cast<T>(v[i]);
    };
    if (L.spec.kind == LayerKind::batchnorm) {
      load("gamma", L.bn.gamma);
      load("beta", L.bn.beta);
      load("running_mean", L.bn.running_mean);
      load("running_var", L.bn.running_var);
      L.bn.momentum = static_cast<T>(s.at("momentum").get<double>());
      L.bn.epsilon = static_cast<T>(s.at("epsilon").get<double>());
    } else {
      require(s.at("weights_shape").get<Shape>() == L.weights.shape(), Errc::ShapeMismatch,
              L.spec.name + " weight shape mismatch");
      load("weights", L.weights.data());
      require(s.value("has_bias", false) == L.has_bias, Errc::InvalidArgument, L.spec.name + " bias flag mismatch");
      if (L.has_bias) load("bias", L.bias.data());
    }
  }
  require(next == stored.size(), Errc::InvalidArgument, "model file has extra layers");
  return net;
}

template <typename T>
void save_network(const std::filesystem::path& path, const Network<T>& net) {
  write_file(path, network_to_json(net).dump());
}

template <typename T>
Network<T> load_network(const std::filesystem::path& path) {
  try {
    return network_from_json<T>(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::InvalidArgument, path.string() + ": " + e.what());
  }
}

}  // namespace sigver
