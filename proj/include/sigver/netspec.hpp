#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sigver/error.hpp"
#include "sigver/layers.hpp"

namespace sigver {

enum class Family { alexnet, alexnet_reduced, vgg, vgg_reduced };

inline constexpr Family kAllFamilies[] = {Family::alexnet_reduced, Family::alexnet, Family::vgg_reduced,
                                          Family::vgg};

constexpr std::string_view family_name(Family f) {
  switch (f) {
    case Family::alexnet: return "alexnet";
    case Family::alexnet_reduced: return "alexnet_reduced";
    case Family::vgg: return "vgg";
    case Family::vgg_reduced: return "vgg_reduced";
  }
  return "alexnet";
}

inline Family parse_family(std::string_view s) {
  for (Family f : kAllFamilies)
    if (family_name(f) == s) return f;
  fail(Errc::UnknownFamily, "unknown network family '" + std::string(s) + "'");
}

enum class LayerKind { conv, pool, dense, batchnorm, relu, softmax };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t units = 0;  // filters for conv, output units for dense
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::string name;

  bool learnable() const { return kind == LayerKind::conv || kind == LayerKind::dense; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
  Family family = Family::alexnet_reduced;
  std::size_t embedding_size = 0;  // after width scaling
  std::size_t num_classes = 0;
  std::size_t input_h = 0, input_w = 0;
  double width_scale = 1.0;
  std::vector<LayerSpec> layers;

  std::size_t count(LayerKind k) const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.kind == k;
    return n;
  }
  std::size_t learnable_count() const { return count(LayerKind::conv) + count(LayerKind::dense); }
  std::size_t pool_count() const { return count(LayerKind::pool); }

  /// Dense layers whose activations may serve as embeddings (FC1, FC2).
  std::vector<std::string> embedding_layers() const {
    std::vector<std::string> out;
    for (const auto& l : layers)
      if (l.kind == LayerKind::dense && (l.name == "FC1" || l.name == "FC2")) out.push_back(l.name);
    return out;
  }

  /// Index of the named layer, or NoSuchLayer.
  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].name == name) return i;
    fail(Errc::NoSuchLayer, "network has no layer named '" + std::string(name) + "'");
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

struct BuildOptions {
  std::optional<std::size_t> first_conv_stride;
};

namespace detail {

inline std::size_t scale_count(std::size_t n, double width_scale) {
  const double v = std::ceil(static_cast<double>(n) * width_scale - 1e-9);
  return v < 1.0 ? 1 : static_cast<std::size_t>(v);
}

struct Builder {
  NetworkSpec& spec;
  double ws;
  std::size_t convs = 0, pools = 0;

  void affine_block(LayerSpec l) {
    const std::string base = l.name;
    spec.layers.push_back(std::move(l));
    spec.layers.push_back({LayerKind::batchnorm, 0, 0, 1, 0, base + "_bn"});
    spec.layers.push_back({LayerKind::relu, 0, 0, 1, 0, base + "_relu"});
  }
  void conv(std::size_t k, std::size_t filters, std::size_t stride = 1, std::size_t pad = 1) {
    affine_block({LayerKind::conv, scale_count(filters, ws), k, stride, pad, "conv" + std::to_string(++convs)});
  }
  // Pools written without stride in the architecture table are non-overlapping.
  void pool(std::size_t k, std::optional<std::size_t> stride = std::nullopt, std::size_t pad = 0) {
    spec.layers.push_back({LayerKind::pool, 0, k, stride.value_or(k), pad, "pool" + std::to_string(++pools)});
  }
  void fc(const std::string& name, std::size_t units) {
    affine_block({LayerKind::dense, units, 0, 1, 0, name});
  }
};

}  // namespace detail

inline void validate_spec(const NetworkSpec& spec);

/// Emits the layer sequence for one architecture family. `embedding` and all
/// filter counts are multiplied by `width_scale` (rounded up, at least 1);
/// every conv/dense except the classifier head is followed by batchnorm+relu.
inline NetworkSpec build_network(Family family, std::size_t embedding, std::size_t num_classes,
                                 std::size_t input_h, std::size_t input_w, double width_scale = 1.0,
                                 const BuildOptions& opts = {}) {
  require(embedding >= 2 && num_classes >= 2, Errc::InvalidArgument, "N and M must be >= 2");
  require(width_scale > 0 && width_scale <= 1, Errc::InvalidArgument, "width_scale must be in (0,1]");
  require(input_h >= 1 && input_w >= 1, Errc::InvalidArgument, "input dims must be >= 1");
  NetworkSpec spec;
  spec.family = family;
  spec.embedding_size = detail::scale_count(embedding, width_scale);
  spec.num_classes = num_classes;
  spec.input_h = input_h;
  spec.input_w = input_w;
  spec.width_scale = width_scale;
  detail::Builder b{spec, width_scale};

  switch (family) {
    case Family::alexnet_reduced:
    case Family::alexnet: {
      const bool full = family == Family::alexnet;
      b.conv(11, 96, opts.first_conv_stride.value_or(4), 0);
      b.pool(3, 2, 0);
      b.conv(5, 256, 1, 2);
      b.pool(3, 2, 0);
      b.conv(3, 384);
      if (full) b.conv(3, 384);
      b.conv(3, 256);
      b.pool(3, 2, 0);
      b.fc("FC1", spec.embedding_size);
      if (full) b.fc("FC2", spec.embedding_size);
      break;
    }
    case Family::vgg_reduced:
    case Family::vgg: {
      const bool full = family == Family::vgg;
      b.conv(3, 64, opts.first_conv_stride.value_or(1));
      b.conv(3, 64);
      b.pool(3);
      b.conv(3, 128);
      b.conv(3, 128);
      b.pool(full ? 3 : 4);
      for (int i = 0; i < 4; ++i) b.conv(3, 256);
      b.pool(full ? 3 : 4);
      if (full) {
        for (int i = 0; i < 4; ++i) b.conv(3, 256);
        b.pool(2);
        for (int i = 0; i < 4; ++i) b.conv(3, 256);
        b.pool(2);
      }
      b.fc("FC1", spec.embedding_size);
      if (full) b.fc("FC2", spec.embedding_size);
      break;
    }
    default:
      fail(Errc::UnknownFamily, "unknown network family");
  }
  spec.layers.push_back({LayerKind::dense, num_classes, 0, 1, 0, "head"});
  spec.layers.push_back({LayerKind::softmax, 0, 0, 1, 0, "softmax"});
  validate_spec(spec);
  return spec;
}

struct LayerShape {
  std::string name;
  LayerKind kind;
  std::size_t channels, height, width;

  std::size_t size() const { return channels * height * width; }
};

/// Symbolic forward pass through the shape law; output shape after each layer.
inline std::vector<LayerShape> shape_plan(const NetworkSpec& spec) {
  std::vector<LayerShape> plan;
  long c = 1, h = static_cast<long>(spec.input_h), w = static_cast<long>(spec.input_w);
  for (const auto& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::pool: {
        const long nh = window_out_dim(h, static_cast<long>(l.kernel), static_cast<long>(l.stride),
                                       static_cast<long>(l.padding));
        const long nw = window_out_dim(w, static_cast<long>(l.kernel), static_cast<long>(l.stride),
                                       static_cast<long>(l.padding));
        require(nh >= 1 && nw >= 1, Errc::ShapeUnderflow,
                "layer " + l.name + " reduces " + std::to_string(h) + "x" + std::to_string(w) +
                    " below 1 pixel");
        h = nh;
        w = nw;
        if (l.kind == LayerKind::conv) c = static_cast<long>(l.units);
        break;
      }
      case LayerKind::dense:
        c = static_cast<long>(l.units);
        h = w = 1;
        break;
      default:
        break;
    }
    plan.push_back({l.name, l.kind, static_cast<std::size_t>(c), static_cast<std::size_t>(h),
                    static_cast<std::size_t>(w)});
  }
  return plan;
}

inline void validate_spec(const NetworkSpec& spec) {
  require(spec.layers.size() >= 2, Errc::InvalidArgument, "network needs at least a head and softmax");
  std::set<std::string> names;
  for (const auto& l : spec.layers) {
    require(!l.name.empty() && names.insert(l.name).second, Errc::InvalidArgument,
            "layer names must be unique and non-empty: '" + l.name + "'");
    if (l.kind == LayerKind::conv || l.kind == LayerKind::pool)
      require(l.kernel >= 1 && l.stride >= 1, Errc::InvalidArgument, l.name + ": kernel and stride must be >= 1");
    if (l.kind == LayerKind::conv || l.kind == LayerKind::dense)
      require(l.units >= 1, Errc::InvalidArgument, l.name + ": unit count must be >= 1");
  }
  const auto& head = spec.layers[spec.layers.size() - 2];
  require(spec.layers.back().kind == LayerKind::softmax && head.kind == LayerKind::dense &&
              head.units == spec.num_classes,
          Errc::InvalidArgument, "network must end with dense(num_classes) + softmax");
  const auto emb = spec.embedding_layers();
  const bool full = spec.family == Family::alexnet || spec.family == Family::vgg;
  require(emb.size() == (full ? 2u : 1u), Errc::InvalidArgument,
          "expected " + std::string(full ? "FC1 and FC2" : "only FC1") + " before the head");
}

// ---------------------------------------------------------------- text form

inline std::string layer_token(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::conv:
      return "conv" + std::to_string(l.kernel) + "-" + std::to_string(l.units) + "-s" + std::to_string(l.stride) +
             "-p" + std::to_string(l.padding);
    case LayerKind::pool:
      return "pool" + std::to_string(l.kernel) + "-s" + std::to_string(l.stride) + "-p" + std::to_string(l.padding);
    case LayerKind::dense: return "FC-" + std::to_string(l.units);
    case LayerKind::batchnorm: return "bn";
    case LayerKind::relu: return "relu";
    case LayerKind::softmax: return "softmax";
  }
  return "?";
}

/// Human-readable form, one "<name> <token>" line per layer.
inline std::string to_text(const NetworkSpec& spec) {
  std::ostringstream os;
  os.precision(17);
  os << "sigver-netspec 1\n"
     << "family " << family_name(spec.family) << "\n"
     << "embedding " << spec.embedding_size << "\n"
     << "classes " << spec.num_classes << "\n"
     << "input " << spec.input_h << "x" << spec.input_w << "\n"
     << "width_scale " << spec.width_scale << "\n";
  for (const auto& l : spec.layers) os << l.name << " " << layer_token(l) << "\n";
  return os.str();
}

namespace detail {

// Parses "conv11-96-s4-p0", "conv3-64" (stride 1, padding 1), "pool3-s2-p0",
// "pool2" (stride = size, padding 0), "FC-531", "bn", "relu", "softmax".
inline LayerSpec parse_token(const std::string& name, const std::string& tok) {
  LayerSpec l;
  l.name = name;
  auto parts = [&](std::string rest) {
    std::vector<std::string> out;
    std::stringstream ss(rest);
    std::string p;
    while (std::getline(ss, p, '-')) out.push_back(p);
    return out;
  };
  auto num = [&](const std::string& s) -> std::size_t {
    require(!s.empty() && s.find_first_not_of("0123456789") == std::string::npos, Errc::InvalidArgument,
            "bad layer token '" + tok + "'");
    return std::stoul(s);
  };
  auto opt = [&](const std::vector<std::string>& p, std::size_t from, std::size_t& stride, std::size_t& pad) {
    for (std::size_t i = from; i < p.size(); ++i) {
      require(p[i].size() >= 2, Errc::InvalidArgument, "bad layer token '" + tok + "'");
      if (p[i][0] == 's') stride = num(p[i].substr(1));
      else if (p[i][0] == 'p') pad = num(p[i].substr(1));
      else fail(Errc::InvalidArgument, "bad layer token '" + tok + "'");
    }
  };
  if (tok == "bn") l.kind = LayerKind::batchnorm;
  else if (tok == "relu") l.kind = LayerKind::relu;
  else if (tok == "softmax") l.kind = LayerKind::softmax;
  else if (tok.rfind("conv", 0) == 0) {
    auto p = parts(tok.substr(4));
    require(p.size() >= 2, Errc::InvalidArgument, "bad conv token '" + tok + "'");
    l.kind = LayerKind::conv;
    l.kernel = num(p[0]);
    l.units = num(p[1]);
    l.stride = 1;
    l.padding = 1;
    opt(p, 2, l.stride, l.padding);
  } else if (tok.rfind("pool", 0) == 0) {
    auto p = parts(tok.substr(4));
    l.kind = LayerKind::pool;
    l.kernel = num(p.at(0));
    l.stride = l.kernel;
    l.padding = 0;
    opt(p, 1, l.stride, l.padding);
  } else if (tok.rfind("FC", 0) == 0) {
    const auto dash = tok.rfind('-');
    require(dash != std::string::npos, Errc::InvalidArgument, "bad FC token '" + tok + "'");
    l.kind = LayerKind::dense;
    l.units = num(tok.substr(dash + 1));
  } else {
    fail(Errc::InvalidArgument, "unknown layer token '" + tok + "'");
  }
  return l;
}

}  // namespace detail

inline NetworkSpec parse_network_spec(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  NetworkSpec spec;
  bool header = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key, value;
    ls >> key >> value;
    require(!value.empty(), Errc::InvalidArgument, "malformed netspec line '" + line + "'");
    if (key == "sigver-netspec") {
      require(value == "1", Errc::InvalidArgument, "unsupported netspec version " + value);
      header = true;
    } else if (key == "family") spec.family = parse_family(value);
    else if (key == "embedding") spec.embedding_size = std::stoul(value);
    else if (key == "classes") spec.num_classes = std::stoul(value);
    else if (key == "input") {
      const auto x = value.find('x');
      require(x != std::string::npos, Errc::InvalidArgument, "input must be HxW");
      spec.input_h = std::stoul(value.substr(0, x));
      spec.input_w = std::stoul(value.substr(x + 1));
    } else if (key == "width_scale") spec.width_scale = std::stod(value);
    else spec.layers.push_back(detail::parse_token(key, value));
  }
  require(header, Errc::InvalidArgument, "missing 'sigver-netspec' header");
  validate_spec(spec);
  return spec;
}

}  // namespace sigver
