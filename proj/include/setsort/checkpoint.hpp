#pragma once

// Text checkpoint of a trained policy network. Numbers use the shortest
// decimal form that parses back to the identical double, so save/load is
// bit-exact.
//
//   setsort-checkpoint
//   format_version 1
//   pooling max
//   num_classes 3
//   frame_stack 4
//   baseline_slots 300
//   config <key> <value>          (one line per resolved setting)
//   layer <group> <index> <activation> <out_dim> <in_dim>
//   weights <out_dim * in_dim values, row-major>
//   biases <out_dim values>
//   end

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "setsort/agent.hpp"
#include "setsort/config.hpp"

namespace setsort {

inline constexpr int kCheckpointFormatVersion = 1;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  int format_version = kCheckpointFormatVersion;
  std::map<std::string, std::string> config;  // resolved settings, informational
  PolicyNet net;
};

namespace detail {

inline void write_values(std::ostream& out, const double* data, Eigen::Index n) {
  char buf[64];
  for (Eigen::Index i = 0; i < n; ++i) {
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, data[i]);
    (void)ec;
    out << ' ';
    out.write(buf, ptr - buf);
  }
}

inline void read_values(std::istream& in, double* data, Eigen::Index n, const std::string& what) {
  std::string tok;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(in >> tok)) throw CheckpointError("truncated " + what);
    const char* end = tok.data() + tok.size();
    auto [ptr, ec] = std::from_chars(tok.data(), end, data[i]);
    if (ec != std::errc() || ptr != end || !std::isfinite(data[i]))
      throw CheckpointError("bad number '" + tok + "' in " + what);
  }
}

inline void expect(std::istream& in, const std::string& word) {
  std::string tok;
  if (!(in >> tok) || tok != word)
    throw CheckpointError("expected '" + word + "', found '" + tok + "'");
}

}  // namespace detail

inline void save_checkpoint(std::ostream& out, const Checkpoint& ck) {
  const PolicyNet& net = ck.net;
  out << "setsort-checkpoint\n";
  out << "format_version " << ck.format_version << "\n";
  out << "pooling " << to_string(net.mode) << "\n";
  out << "num_classes " << net.num_classes << "\n";
  out << "frame_stack " << net.frame_stack << "\n";
  out << "baseline_slots " << net.baseline_slots << "\n";
  for (const auto& [k, v] : ck.config) out << "config " << k << ' ' << v << "\n";
  auto write_group = [&](const char* name, const Layers<double>& layers) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      out << "layer " << name << ' ' << i << ' ' << to_string(l.activation) << ' ' << l.out_dim()
          << ' ' << l.in_dim() << "\nweights";
      detail::write_values(out, l.weights.data(), l.weights.size());
      out << "\nbiases";
      detail::write_values(out, l.biases.data(), l.biases.size());
      out << "\n";
    }
  };
  write_group("instance_encoder", net.instance_encoder);
  write_group("state_encoder", net.state_encoder);
  write_group("q_head", net.q_head);
  out << "end\n";
}

inline Checkpoint load_checkpoint(std::istream& in) {
  Checkpoint ck;
  std::string tok;
  if (!(in >> tok) || tok != "setsort-checkpoint") throw CheckpointError("not a setsort checkpoint");
  detail::expect(in, "format_version");
  if (!(in >> ck.format_version)) throw CheckpointError("unreadable format_version");
  if (ck.format_version != kCheckpointFormatVersion)
    throw CheckpointError("unsupported checkpoint format_version " +
                          std::to_string(ck.format_version) + " (expected " +
                          std::to_string(kCheckpointFormatVersion) + ")");
  PolicyNet& net = ck.net;
  detail::expect(in, "pooling");
  in >> tok;
  try {
    net.mode = encoder_mode_from_string(tok);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(e.what());
  }
  detail::expect(in, "num_classes");
  if (!(in >> net.num_classes) || net.num_classes <= 0) throw CheckpointError("bad num_classes");
  detail::expect(in, "frame_stack");
  if (!(in >> net.frame_stack) || net.frame_stack <= 0) throw CheckpointError("bad frame_stack");
  detail::expect(in, "baseline_slots");
  if (!(in >> net.baseline_slots) || net.baseline_slots <= 0)
    throw CheckpointError("bad baseline_slots");

  while (in >> tok) {
    if (tok == "end") break;
    if (tok == "config") {
      std::string key, value;
      in >> key;
      std::getline(in, value);
      ck.config[key] = detail::trim(value);
      continue;
    }
    if (tok != "layer") throw CheckpointError("unexpected token '" + tok + "'");
    std::string group, act;
    std::size_t index = 0;
    Eigen::Index out_dim = 0, in_dim = 0;
    if (!(in >> group >> index >> act >> out_dim >> in_dim) || out_dim <= 0 || in_dim <= 0)
      throw CheckpointError("malformed layer header");
    Layers<double>* layers = group == "instance_encoder" ? &net.instance_encoder
                             : group == "state_encoder"  ? &net.state_encoder
                             : group == "q_head"         ? &net.q_head
                                                         : nullptr;
    if (!layers) throw CheckpointError("unknown layer group '" + group + "'");
    if (index != layers->size()) throw CheckpointError("layers of '" + group + "' out of order");
    DenseLayer<double> layer;
    try {
      layer.activation = activation_from_string(act);
    } catch (const std::invalid_argument& e) {
      throw CheckpointError(e.what());
    }
    layer.weights.resize(out_dim, in_dim);
    layer.biases.resize(out_dim);
    const std::string where = group + "." + std::to_string(index);
    detail::expect(in, "weights");
    detail::read_values(in, layer.weights.data(), layer.weights.size(), where + " weights");
    detail::expect(in, "biases");
    detail::read_values(in, layer.biases.data(), layer.biases.size(), where + " biases");
    layers->push_back(std::move(layer));
  }
  if (tok != "end") throw CheckpointError("checkpoint is truncated (missing 'end')");

  try {
    if (net.deep_sets()) {
      if (net.instance_encoder.empty()) throw CheckpointError("missing instance encoder");
      spec_of(net.instance_encoder).validate();
      if (net.instance_encoder.front().in_dim() != static_cast<std::size_t>(net.num_classes))
        throw CheckpointError("instance encoder input does not match num_classes");
    } else if (!net.instance_encoder.empty()) {
      throw CheckpointError("baseline checkpoint has an instance encoder");
    }
    if (net.state_encoder.empty() || net.q_head.empty())
      throw CheckpointError("missing state encoder or Q head");
    spec_of(net.state_encoder).validate();
    spec_of(net.q_head).validate();
    if (net.state_encoder.front().in_dim() != net.stacked_dim() ||
        net.state_encoder.back().out_dim() != net.q_head.front().in_dim() ||
        net.q_head.back().out_dim() != static_cast<std::size_t>(net.num_actions()))
      throw CheckpointError("layer shapes do not chain");
  } catch (const DimensionError& e) {
    throw CheckpointError(e.what());
  }
  return ck;
}

inline void save_checkpoint_file(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot write '" + path + "'");
  save_checkpoint(out, ck);
  if (!out) throw CheckpointError("failed writing '" + path + "'");
}

inline Checkpoint load_checkpoint_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot read '" + path + "'");
  return load_checkpoint(in);
}

}  // namespace setsort
