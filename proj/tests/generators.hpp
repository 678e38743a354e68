#pragma once

// Hand-rolled generators for property tests.

#include <string>
#include <vector>

#include "lcrp/builder.hpp"
#include "lcrp/random.hpp"
#include "lcrp/tensor.hpp"

namespace gen {

inline lcrp::Tensor random_tensor(lcrp::Rng& rng, const lcrp::Shape& s, double lo = -1.0, double hi = 1.0) {
  lcrp::Tensor t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

inline lcrp::Tensor random_image(lcrp::Rng& rng, const lcrp::Shape& s) { return random_tensor(rng, s, 0.0, 1.0); }

struct GraphOptions {
  bool bias = true;
  bool batchnorm = true;
  bool skip = true;     // add junction
  bool concat = true;
  bool pools = true;
  bool avgpool = true;  // uniform avgpool redistribution is not gradient based
  int size = 8;         // input H = W
  int channels = 3;
};

// Random small conv net drawn from the supported op set. The head is raw
// (no head contract) and ends in a conv producing 3 channels.
inline lcrp::Graph random_graph(std::uint64_t seed, const GraphOptions& o = {}) {
  lcrp::Rng pick(seed * 7919 + 13);
  lcrp::GraphBuilder b("random", lcrp::Shape{o.channels, o.size, o.size}, lcrp::HeadSpec{}, seed);
  std::string cur = "input";
  int id = 0;
  auto name = [&](const char* p) { return std::string(p) + std::to_string(id++); };
  const int blocks = 2 + static_cast<int>(pick.below(3));
  for (int k = 0; k < blocks; ++k) {
    const int c = 2 + static_cast<int>(pick.below(4));
    const int ksz = pick.bernoulli(0.5) ? 3 : 1;
    cur = b.conv(name("conv"), cur, c, ksz, 1, ksz / 2, o.bias);
    if (o.batchnorm && pick.bernoulli(0.5)) cur = b.batchnorm(name("bn"), cur);
    cur = b.relu(name("relu"), cur);
    const auto& s = b.shape(cur);
    const double u = pick.uniform();
    if (o.skip && u < 0.3) {
      const std::string branch = b.relu(name("relu"), b.conv(name("conv"), cur, s.channels(), 3, 1, 1, o.bias));
      cur = b.add_junction(name("add"), {cur, branch});
    } else if (o.concat && u < 0.45) {
      const std::string branch = b.relu(name("relu"), b.conv(name("conv"), cur, 2, 1, 1, 0, o.bias));
      cur = b.concat(name("cat"), {cur, branch});
    } else if (o.pools && u < 0.65 && s[1] >= 4) {
      cur = (pick.bernoulli(0.5) || !o.avgpool) ? b.maxpool(name("pool"), cur, 2, 2) : b.avgpool(name("pool"), cur, 2, 2);
    } else if (o.pools && u < 0.75 && s[1] <= 4) {
      cur = b.upsample(name("up"), cur, 2);
    }
  }
  b.conv(name("head"), cur, 3, 1, 1, 0, o.bias);
  return b.build();
}

// conv -> relu -> conv -> relu -> conv chain with a given middle width.
inline lcrp::Graph chain(std::uint64_t seed, int width, int size = 8, bool bias = false) {
  lcrp::GraphBuilder b("chain", lcrp::Shape{3, size, size}, lcrp::HeadSpec{}, seed);
  auto x = b.relu("r1", b.conv("c1", "input", 8, 3, 1, 1, bias));
  x = b.relu("r2", b.conv("c2", x, width, 3, 1, 1, bias));
  b.conv("c3", x, 2, 1, 1, 0, bias);
  return b.build();
}

}  // namespace gen
