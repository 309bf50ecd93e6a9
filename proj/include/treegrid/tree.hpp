#pragma once

// Barnes-Hut octree for the short-range half of the TreePM split, and the
// local-essential-tree (LET) records that let a site reproduce the serial tree
// walk for its own particles.
//
// Nodes are dyadic cubes addressed by integer keys, so the tree built on one
// site and the tree assembled from remote LET records agree on geometry
// exactly. Only node aggregates (mass, centre of mass) can differ, by
// floating-point summation order.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "treegrid/domain.hpp"
#include "treegrid/wire.hpp"

namespace treegrid {

/// A point mass as seen by the tree.
struct Body {
  std::uint64_t id = 0;
  Vec3 pos;
  double mass = 0.0;
};

inline Body to_body(const Particle& p) { return {p.id, p.pos, p.mass}; }

/// Axis-aligned cube the tree is rooted on.
struct Region {
  Vec3 origin;
  double width = 1.0;

  [[nodiscard]] bool contains(const Vec3& p) const {
    for (int k = 0; k < 3; ++k)
      if (!(p[k] >= origin[k] && p[k] < origin[k] + width)) return false;
    return true;
  }

  static Region unit_box() { return {{0.0, 0.0, 0.0}, 1.0}; }
};

struct OctreeNode {
  Vec3 center;
  double half_width = 0.0;
  double total_mass = 0.0;
  Vec3 com;
  std::uint64_t count = 0;  // bodies below this node, including remote ones
  std::array<std::int32_t, 8> children{-1, -1, -1, -1, -1, -1, -1, -1};
  std::uint32_t body_first = 0;
  std::uint32_t body_count = 0;
  std::uint32_t ix = 0, iy = 0, iz = 0;  // integer origin at this level
  std::uint8_t level = 0;
  bool leaf = false;
  bool closed = false;  // internal node known only as an aggregate

  [[nodiscard]] double width() const { return 2.0 * half_width; }
};

struct Octree {
  Region bounds;
  std::uint32_t leaf_capacity = 8;
  std::vector<OctreeNode> nodes;  // nodes[0] is the root when non-empty
  std::vector<Body> bodies;       // leaf payloads, id-sorted within a leaf

  [[nodiscard]] bool empty() const { return nodes.empty(); }
};

inline constexpr int kMaxTreeDepth = 30;
inline constexpr std::uint32_t kGridScale = 1u << kMaxTreeDepth;

/// Nodes exported to a remote slab. `kind` tells the receiver what it got.
enum class LetKind : std::uint8_t { opened = 0, closed = 1, leaf = 2 };

struct LetNode {
  std::uint8_t level = 0;
  LetKind kind = LetKind::opened;
  std::uint8_t n_children = 0;  // exported children, following in preorder
  std::uint32_t ix = 0, iy = 0, iz = 0;
  std::uint64_t count = 0;
  double mass = 0.0;
  Vec3 com;
  std::uint32_t body_first = 0;  // leaf bodies in LetPayload::bodies
  std::uint32_t body_count = 0;
};

struct LetPayload {
  std::uint32_t origin = 0;
  std::uint32_t destination = 0;
  std::vector<LetNode> nodes;  // preorder
  std::vector<Body> bodies;

  [[nodiscard]] bool empty() const { return nodes.empty(); }
};

struct TreeForce {
  Vec3 accel;
  std::uint64_t interactions = 0;
};

// ---------------------------------------------------------------------------
// Kernel

/// Short-range force factor f such that the acceleration from a point mass m
/// at displacement d is f(|d|) * m * d.
///
///   f(r) = S(r) / (r^2 + eps^2)^(3/2)
///   S(r) = erfc(r / (2 r_s)) + r / (r_s sqrt(pi)) * exp(-r^2 / (4 r_s^2))
///
/// S is the real-space complement of the exp(-k^2 r_s^2) long-range filter;
/// Plummer softening replaces the Newtonian r^-3. f is exactly zero for r >= r_cut.
inline double short_range_kernel(double r, double eps, double r_split, double r_cut) {
  if (!(r >= 0.0)) throw InvalidInput("separation must be non-negative");
  if (r >= r_cut) return 0.0;
  const double u = r / (2.0 * r_split);
  const double split =
      std::erfc(u) + r / (r_split * std::sqrt(std::numbers::pi)) * std::exp(-u * u);
  const double s2 = r * r + eps * eps;
  return split / (s2 * std::sqrt(s2));
}

// ---------------------------------------------------------------------------
// Construction

namespace detail {

struct GridBody {
  std::uint32_t gx, gy, gz;
  std::uint32_t index;  // into the body pool
};

inline std::uint32_t grid_coord(double v, double origin, double width) {
  const double t = (v - origin) / width * static_cast<double>(kGridScale);
  if (t <= 0.0) return 0;
  if (t >= static_cast<double>(kGridScale - 1)) return kGridScale - 1;
  return static_cast<std::uint32_t>(t);
}

inline int octant_of(const GridBody& b, int level) {
  const int shift = kMaxTreeDepth - level - 1;
  return static_cast<int>(((b.gx >> shift) & 1u) << 2 | ((b.gy >> shift) & 1u) << 1 |
                          ((b.gz >> shift) & 1u));
}

// A remote LET record, addressed inside its payload.
struct RecordRef {
  const LetPayload* payload;
  std::uint32_t node;
  std::vector<std::uint32_t> children;  // payload node indices
};

class TreeAssembler {
 public:
  TreeAssembler(Octree& tree, std::span<const Body> pool) : tree_(tree), pool_(pool) {}

  // Builds the node for cube (level, ix, iy, iz) and returns its index.
  std::int32_t build(int level, std::uint32_t ix, std::uint32_t iy, std::uint32_t iz,
                     std::vector<GridBody>& raw, std::vector<RecordRef>& records) {
    const auto index = static_cast<std::int32_t>(tree_.nodes.size());
    tree_.nodes.emplace_back();
    OctreeNode node;
    node.level = static_cast<std::uint8_t>(level);
    node.ix = ix;
    node.iy = iy;
    node.iz = iz;
    const double cell = tree_.bounds.width / static_cast<double>(1u << level);
    node.half_width = 0.5 * cell;
    node.center = tree_.bounds.origin + Vec3{(ix + 0.5) * cell, (iy + 0.5) * cell, (iz + 0.5) * cell};

    std::uint64_t count = raw.size();
    double mass = 0.0;
    Vec3 mpos;
    for (const auto& g : raw) {
      const Body& b = pool_[g.index];
      mass += b.mass;
      mpos += b.pos * b.mass;
    }
    bool any_closed = false;
    for (const auto& r : records) {
      const LetNode& n = r.payload->nodes[r.node];
      count += n.count;
      mass += n.mass;
      mpos += n.com * n.mass;
      any_closed = any_closed || n.kind == LetKind::closed;
    }
    node.count = count;

    if (count <= tree_.leaf_capacity || level == kMaxTreeDepth) {
      if (!records.empty()) throw std::logic_error("LET record where a leaf was expected");
      std::vector<Body> leaf;
      leaf.reserve(raw.size());
      for (const auto& g : raw) leaf.push_back(pool_[g.index]);
      std::sort(leaf.begin(), leaf.end(), [](const Body& a, const Body& b) { return a.id < b.id; });
      double lm = 0.0;
      Vec3 lp;
      for (const auto& b : leaf) {
        lm += b.mass;
        lp += b.pos * b.mass;
      }
      node.leaf = true;
      node.total_mass = lm;
      node.com = lm > 0.0 ? lp * (1.0 / lm) : node.center;
      node.body_first = static_cast<std::uint32_t>(tree_.bodies.size());
      node.body_count = static_cast<std::uint32_t>(leaf.size());
      tree_.bodies.insert(tree_.bodies.end(), leaf.begin(), leaf.end());
      tree_.nodes[index] = node;
      return index;
    }

    node.total_mass = mass;
    node.com = mass > 0.0 ? mpos * (1.0 / mass) : node.center;
    if (any_closed) {
      node.closed = true;
      tree_.nodes[index] = node;
      return index;
    }

    std::array<std::vector<GridBody>, 8> child_raw;
    std::array<std::vector<RecordRef>, 8> child_records;
    for (const auto& g : raw) child_raw[octant_of(g, level)].push_back(g);
    raw.clear();
    raw.shrink_to_fit();
    for (const auto& r : records) {
      const LetPayload& p = *r.payload;
      for (std::uint32_t c : r.children) {
        const LetNode& cn = p.nodes[c];
        const int oct = static_cast<int>((cn.ix & 1u) << 2 | (cn.iy & 1u) << 1 | (cn.iz & 1u));
        if (cn.kind == LetKind::leaf) {
          // Leaf records contribute raw bodies; their aggregate is redundant.
          for (std::uint32_t k = 0; k < cn.body_count; ++k) {
            const auto bi = static_cast<std::uint32_t>(remote_base(p) + cn.body_first + k);
            child_raw[oct].push_back(grid_body(bi));
          }
        } else {
          child_records[oct].push_back({&p, c, children_of(p, c)});
        }
      }
    }
    records.clear();

    for (int oct = 0; oct < 8; ++oct) {
      if (child_raw[oct].empty() && child_records[oct].empty()) continue;
      const std::uint32_t cx = ix * 2 + ((oct >> 2) & 1);
      const std::uint32_t cy = iy * 2 + ((oct >> 1) & 1);
      const std::uint32_t cz = iz * 2 + (oct & 1);
      const auto child = build(level + 1, cx, cy, cz, child_raw[oct], child_records[oct]);
      node.children[oct] = child;
    }
    tree_.nodes[index] = node;
    return index;
  }

  GridBody grid_body(std::uint32_t pool_index) const {
    const Body& b = pool_[pool_index];
    const auto& o = tree_.bounds.origin;
    const double w = tree_.bounds.width;
    return {grid_coord(b.pos.x, o.x, w), grid_coord(b.pos.y, o.y, w), grid_coord(b.pos.z, o.z, w),
            pool_index};
  }

  void set_remote_bases(std::vector<std::pair<const LetPayload*, std::size_t>> bases) {
    bases_ = std::move(bases);
  }

  static std::vector<std::uint32_t> children_of(const LetPayload& p, std::uint32_t node) {
    // Preorder: the first child directly follows its parent; siblings follow
    // each other's complete subtrees.
    std::vector<std::uint32_t> out;
    std::uint32_t next = node + 1;
    for (int c = 0; c < p.nodes[node].n_children; ++c) {
      if (next >= p.nodes.size()) throw wire::DecodeError("LET preorder truncated");
      out.push_back(next);
      next = subtree_end(p, next);
    }
    return out;
  }

  static std::uint32_t subtree_end(const LetPayload& p, std::uint32_t node) {
    std::uint32_t pending = 1;
    std::uint32_t i = node;
    while (pending > 0) {
      if (i >= p.nodes.size()) throw wire::DecodeError("LET preorder truncated");
      pending += p.nodes[i].n_children;
      --pending;
      ++i;
    }
    return i;
  }

 private:
  std::size_t remote_base(const LetPayload& p) const {
    for (const auto& [ptr, base] : bases_)
      if (ptr == &p) return base;
    throw std::logic_error("unknown LET payload");
  }

  Octree& tree_;
  std::span<const Body> pool_;
  std::vector<std::pair<const LetPayload*, std::size_t>> bases_;
};

}  // namespace detail

/// Builds the tree over `local` bodies plus any remote LET payloads. With no
/// payloads this is the plain serial build.
inline Octree assemble_tree(std::span<const Body> local, std::span<const LetPayload> remote,
                            const Region& bounds = Region::unit_box(),
                            std::uint32_t leaf_capacity = 8) {
  if (leaf_capacity < 1) throw InvalidInput("leaf capacity must be >= 1");
  Octree tree;
  tree.bounds = bounds;
  tree.leaf_capacity = leaf_capacity;

  std::vector<Body> pool(local.begin(), local.end());
  for (const auto& b : local)
    if (!bounds.contains(b.pos)) throw InvalidInput("particle outside tree bounds");

  std::vector<std::pair<const LetPayload*, std::size_t>> bases;
  for (const auto& p : remote) {
    bases.emplace_back(&p, pool.size());
    pool.insert(pool.end(), p.bodies.begin(), p.bodies.end());
  }
  if (pool.empty() && std::all_of(remote.begin(), remote.end(), [](const auto& p) { return p.empty(); }))
    return tree;

  detail::TreeAssembler assembler(tree, pool);
  assembler.set_remote_bases(std::move(bases));

  std::vector<detail::GridBody> raw;
  raw.reserve(local.size());
  for (std::uint32_t i = 0; i < local.size(); ++i) raw.push_back(assembler.grid_body(i));

  // Roots of remote payloads: leaf roots become raw bodies, others records.
  std::vector<detail::RecordRef> records;
  std::size_t offset = local.size();
  for (const auto& p : remote) {
    if (!p.nodes.empty()) {
      const LetNode& root = p.nodes[0];
      if (root.level != 0 || root.ix != 0 || root.iy != 0 || root.iz != 0)
        throw wire::DecodeError("LET must start at the root");
      if (root.kind == LetKind::leaf) {
        for (std::uint32_t k = 0; k < root.body_count; ++k)
          raw.push_back(assembler.grid_body(static_cast<std::uint32_t>(offset + root.body_first + k)));
      } else {
        records.push_back({&p, 0, detail::TreeAssembler::children_of(p, 0)});
      }
    }
    offset += p.bodies.size();
  }
  if (raw.empty() && records.empty()) return tree;
  assembler.build(0, 0, 0, 0, raw, records);
  return tree;
}

inline Octree build_tree(std::span<const Body> bodies, const Region& bounds = Region::unit_box(),
                         std::uint32_t leaf_capacity = 8) {
  return assemble_tree(bodies, {}, bounds, leaf_capacity);
}

inline Octree build_tree(std::span<const Particle> particles, const Region& bounds = Region::unit_box(),
                         std::uint32_t leaf_capacity = 8) {
  std::vector<Body> bodies;
  bodies.reserve(particles.size());
  for (const auto& p : particles) bodies.push_back(to_body(p));
  return build_tree(std::span<const Body>(bodies), bounds, leaf_capacity);
}

// ---------------------------------------------------------------------------
// Walks

namespace detail {

/// Distance from a point to a cube under the unit-box minimum image.
inline double cube_distance(const Vec3& target, const OctreeNode& n) {
  double s = 0.0;
  for (int k = 0; k < 3; ++k) {
    const double d = std::max(0.0, std::abs(min_image(n.center[k] - target[k])) - n.half_width);
    s += d * d;
  }
  return std::sqrt(s);
}

/// Periodic distance along x between [c-h, c+h] and a slab [lo, hi).
inline double slab_gap(double c, double h, const SlabDomain& slab) {
  double best = 1.0;
  for (int shift = -1; shift <= 1; ++shift) {
    const double lo = slab.lo + shift;
    const double hi = slab.hi + shift;
    const double gap = std::max({0.0, lo - (c + h), (c - h) - hi});
    best = std::min(best, gap);
  }
  return best;
}

}  // namespace detail

struct WalkParams {
  double theta = 0.5;
  double eps = 0.0;
  double r_split = 1.25 / 64.0;
  double r_cut = 8.0 * 1.25 / 64.0;
};

/// Short-range acceleration at `target` from every body in the tree.
/// Bodies exactly at the target position (the target itself) are skipped.
inline TreeForce tree_force(const Octree& tree, const Vec3& target, const WalkParams& wp) {
  if (!(wp.theta >= 0.0)) throw InvalidInput("theta must be >= 0");
  TreeForce out;
  if (tree.empty()) return out;
  std::int32_t stack[8 * (kMaxTreeDepth + 2)];
  int top = 0;
  stack[top++] = 0;
  while (top > 0) {
    const OctreeNode& n = tree.nodes[stack[--top]];
    if (detail::cube_distance(target, n) > wp.r_cut) continue;
    if (n.leaf) {
      for (std::uint32_t k = 0; k < n.body_count; ++k) {
        const Body& b = tree.bodies[n.body_first + k];
        const Vec3 d = min_image(b.pos - target);
        const double r2 = dot(d, d);
        if (r2 == 0.0) continue;
        out.accel += d * (short_range_kernel(std::sqrt(r2), wp.eps, wp.r_split, wp.r_cut) * b.mass);
        ++out.interactions;
      }
      continue;
    }
    const double dist = norm(min_image(n.center - target));
    const bool open = !(n.width() < wp.theta * dist);  // tie opens
    if (!open) {
      const Vec3 d = min_image(n.com - target);
      out.accel += d * (short_range_kernel(norm(d), wp.eps, wp.r_split, wp.r_cut) * n.total_mass);
      ++out.interactions;
      continue;
    }
    if (n.closed) throw std::logic_error("tree walk needs a subtree missing from the LET");
    // Push in reverse so children are visited in octant order.
    for (int c = 7; c >= 0; --c)
      if (n.children[c] >= 0) stack[top++] = n.children[c];
  }
  return out;
}

/// Exports the part of `tree` that bodies inside `remote` can see.
inline LetPayload extract_let(const Octree& tree, const SlabDomain& remote, double theta, double r_cut,
                              std::uint32_t origin = 0) {
  if (!(theta >= 0.0)) throw InvalidInput("theta must be >= 0");
  if (!(remote.hi > remote.lo)) throw InvalidInput("remote slab is empty");
  LetPayload out;
  out.origin = origin;
  out.destination = remote.site_id;
  if (tree.empty()) return out;
  if (tree.bounds.origin != Vec3{} || tree.bounds.width != 1.0)
    throw InvalidInput("LET extraction needs a tree rooted on the unit box");

  // Margins keep the export a superset of what the serial walk touches when
  // distances tie up to rounding.
  constexpr double kRelMargin = 1e-12;
  constexpr double kAbsMargin = 1e-9;

  auto visit = [&](auto&& self, std::int32_t idx) -> bool {
    const OctreeNode& n = tree.nodes[idx];
    const double gap = detail::slab_gap(n.center.x, n.half_width, remote);
    if (gap > r_cut + kAbsMargin) return false;
    LetNode rec;
    rec.level = n.level;
    rec.ix = n.ix;
    rec.iy = n.iy;
    rec.iz = n.iz;
    rec.count = n.count;
    rec.mass = n.total_mass;
    rec.com = n.com;
    const auto slot = out.nodes.size();
    if (n.leaf) {
      rec.kind = LetKind::leaf;
      rec.body_first = static_cast<std::uint32_t>(out.bodies.size());
      rec.body_count = n.body_count;
      out.bodies.insert(out.bodies.end(), tree.bodies.begin() + n.body_first,
                        tree.bodies.begin() + n.body_first + n.body_count);
      out.nodes.push_back(rec);
      return true;
    }
    // Nearest point of the slab to the node centre.
    const double nearest = detail::slab_gap(n.center.x, 0.0, remote);
    if (n.width() < theta * nearest * (1.0 - kRelMargin)) {
      rec.kind = LetKind::closed;
      out.nodes.push_back(rec);
      return true;
    }
    if (n.closed) throw std::logic_error("cannot export an aggregate-only node as opened");
    rec.kind = LetKind::opened;
    out.nodes.push_back(rec);
    std::uint8_t kids = 0;
    for (int c = 0; c < 8; ++c)
      if (n.children[c] >= 0 && self(self, n.children[c])) ++kids;
    out.nodes[slot].n_children = kids;
    return true;
  };
  visit(visit, 0);
  return out;
}

// ---------------------------------------------------------------------------
// Wire form

inline wire::Bytes encode_let(const LetPayload& p) {
  wire::Writer w(32 + p.nodes.size() * 64 + p.bodies.size() * 40);
  w.put_tag("LET1").put(p.origin).put(p.destination);
  w.put(static_cast<std::uint64_t>(p.nodes.size()));
  for (const auto& n : p.nodes) {
    w.put(n.level).put(static_cast<std::uint8_t>(n.kind)).put(n.n_children);
    w.put(n.ix).put(n.iy).put(n.iz).put(n.count).put(n.mass);
    w.put(n.com.x).put(n.com.y).put(n.com.z).put(n.body_first).put(n.body_count);
  }
  w.put(static_cast<std::uint64_t>(p.bodies.size()));
  for (const auto& b : p.bodies) w.put(b.id).put(b.pos.x).put(b.pos.y).put(b.pos.z).put(b.mass);
  return std::move(w).take();
}

inline LetPayload decode_let(std::span<const std::byte> bytes) {
  wire::Reader r(bytes);
  if (!r.match_tag("LET1")) throw wire::DecodeError("bad LET magic");
  LetPayload p;
  p.origin = r.get<std::uint32_t>();
  p.destination = r.get<std::uint32_t>();
  const auto n_nodes = r.get<std::uint64_t>();
  if (n_nodes > r.remaining() / 60) throw wire::DecodeError("LET node count exceeds payload");
  p.nodes.resize(n_nodes);
  for (auto& n : p.nodes) {
    n.level = r.get<std::uint8_t>();
    const auto kind = r.get<std::uint8_t>();
    if (kind > 2) throw wire::DecodeError("bad LET node kind");
    n.kind = static_cast<LetKind>(kind);
    n.n_children = r.get<std::uint8_t>();
    n.ix = r.get<std::uint32_t>();
    n.iy = r.get<std::uint32_t>();
    n.iz = r.get<std::uint32_t>();
    n.count = r.get<std::uint64_t>();
    n.mass = r.get<double>();
    n.com.x = r.get<double>();
    n.com.y = r.get<double>();
    n.com.z = r.get<double>();
    n.body_first = r.get<std::uint32_t>();
    n.body_count = r.get<std::uint32_t>();
  }
  const auto n_bodies = r.get<std::uint64_t>();
  if (n_bodies > r.remaining() / 40) throw wire::DecodeError("LET body count exceeds payload");
  p.bodies.resize(n_bodies);
  for (auto& b : p.bodies) {
    b.id = r.get<std::uint64_t>();
    b.pos.x = r.get<double>();
    b.pos.y = r.get<double>();
    b.pos.z = r.get<double>();
    b.mass = r.get<double>();
  }
  for (const auto& n : p.nodes)
    if (static_cast<std::uint64_t>(n.body_first) + n.body_count > p.bodies.size())
      throw wire::DecodeError("LET leaf references missing bodies");
  return p;
}

}  // namespace treegrid
