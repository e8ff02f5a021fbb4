#include "poiverify/annindex.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <queue>
#include <thread>

namespace poiverify::annindex {

namespace {

constexpr double kUnitTolerance = 1e-6;
constexpr int kMaxTreeDepth = 64;
constexpr int kSplitRetries = 8;

double dot(const double* a, const double* b, int dim) {
  double acc = 0.0;
  for (int j = 0; j < dim; ++j) acc += a[j] * b[j];
  return acc;
}

bool better(const Neighbor& a, const Neighbor& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

}  // namespace

std::vector<Neighbor> brute_force_knn(const EmbeddingSet& embeddings,
                                      std::span<const double> q, std::size_t k) {
  if (k < 1) throw param_error("brute_force_knn: k must be >= 1");
  std::vector<Neighbor> all;
  all.reserve(embeddings.size());
  for (const auto& [id, v] : embeddings) {
    if (v.size() != q.size())
      throw param_error("brute_force_knn: dimension mismatch");
    all.push_back({id, dot(v.data(), q.data(), static_cast<int>(q.size()))});
  }
  std::sort(all.begin(), all.end(), better);
  if (all.size() > k) all.resize(k);
  return all;
}

AnnForest AnnForest::build(const EmbeddingSet& embeddings, int n_trees, int leaf_cap,
                           std::uint64_t seed, int threads) {
  if (embeddings.empty()) throw param_error("AnnForest: need at least one vector");
  if (n_trees < 1 || leaf_cap < 1)
    throw param_error("AnnForest: n_trees and leaf_cap must be >= 1");

  AnnForest forest;
  forest.dim_ = static_cast<int>(embeddings.front().second.size());
  forest.leaf_cap_ = leaf_cap;
  forest.seed_ = seed;

  // id-sorted storage, so the forest is independent of input ordering
  std::vector<std::size_t> order(embeddings.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return embeddings[a].first < embeddings[b].first;
  });

  forest.ids_.reserve(embeddings.size());
  forest.vectors_.reserve(embeddings.size() * static_cast<std::size_t>(forest.dim_));
  for (const std::size_t i : order) {
    const auto& [id, v] = embeddings[i];
    if (!forest.ids_.empty() && forest.ids_.back() == id)
      throw integrity_error("AnnForest: duplicate id " + std::to_string(id));
    if (static_cast<int>(v.size()) != forest.dim_)
      throw integrity_error("AnnForest: inconsistent vector dimension");
    double norm = 0.0;
    for (const double x : v) norm += x * x;
    if (std::abs(std::sqrt(norm) - 1.0) > kUnitTolerance)
      throw integrity_error("AnnForest: vector for id " + std::to_string(id) +
                            " is not unit-norm");
    forest.ids_.push_back(id);
    forest.vectors_.insert(forest.vectors_.end(), v.begin(), v.end());
  }

  forest.trees_.resize(n_trees);
  if (threads < 1) threads = 1;
  std::vector<std::thread> workers;
  const int per_worker = (n_trees + threads - 1) / threads;
  for (int w = 0; w < threads; ++w) {
    const int begin = w * per_worker;
    if (begin >= n_trees) break;
    const int end = std::min(n_trees, begin + per_worker);
    workers.emplace_back([&forest, seed, begin, end] {
      for (int t = begin; t < end; ++t)
        forest.trees_[t] = forest.build_tree(mix_seed(seed, static_cast<std::uint64_t>(t)));
    });
  }
  for (auto& t : workers) t.join();

  double depth_sum = 0.0;
  std::size_t depth_items = 0;
  for (const auto& tree : forest.trees_) {
    // leaf depth recovered by walking: accumulate via BFS with depth labels
    std::vector<std::pair<std::int32_t, int>> stack{{0, 0}};
    while (!stack.empty()) {
      const auto [node, depth] = stack.back();
      stack.pop_back();
      const Node& nd = tree.nodes[node];
      if (nd.left < 0) {
        const std::size_t count = static_cast<std::size_t>(nd.end - nd.begin);
        depth_sum += static_cast<double>(depth) * static_cast<double>(count);
        depth_items += count;
        forest.stats_.n_leaves += 1;
        forest.stats_.max_depth = std::max(forest.stats_.max_depth, depth);
      } else {
        stack.push_back({nd.left, depth + 1});
        stack.push_back({nd.right, depth + 1});
      }
    }
  }
  forest.stats_.mean_leaf_depth = depth_items > 0 ? depth_sum / depth_items : 0.0;
  return forest;
}

AnnForest::Tree AnnForest::build_tree(std::uint64_t tree_seed) const {
  Tree tree;
  Rng rng(tree_seed);
  const int dim = dim_;
  const std::size_t n = ids_.size();

  std::vector<std::uint32_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = static_cast<std::uint32_t>(i);
  tree.items.reserve(n);

  // returns node index
  auto alloc_node = [&tree, dim]() {
    tree.nodes.emplace_back();
    tree.normals.resize(tree.nodes.size() * static_cast<std::size_t>(dim), 0.0);
    return static_cast<std::int32_t>(tree.nodes.size() - 1);
  };

  struct Pending {
    std::int32_t node;
    std::vector<std::uint32_t> items;
    int depth;
  };
  std::vector<Pending> pending;
  pending.push_back({alloc_node(), std::move(all), 0});

  while (!pending.empty()) {
    Pending task = std::move(pending.back());
    pending.pop_back();
    auto& items = task.items;

    bool make_leaf = static_cast<int>(items.size()) <= leaf_cap_ ||
                     task.depth >= kMaxTreeDepth;
    std::vector<double> normal(dim, 0.0);
    double offset = 0.0;
    std::vector<std::uint32_t> neg, pos;

    if (!make_leaf) {
      bool split_ok = false;
      for (int attempt = 0; attempt < kSplitRetries && !split_ok; ++attempt) {
        const std::uint32_t ia = items[rng.next_below(items.size())];
        std::uint32_t ib = ia;
        for (int tries = 0; tries < kSplitRetries && ib == ia; ++tries)
          ib = items[rng.next_below(items.size())];
        if (ia == ib) continue;
        const double* a = vec(ia);
        const double* b = vec(ib);
        double norm2 = 0.0;
        for (int j = 0; j < dim; ++j) {
          normal[j] = a[j] - b[j];
          norm2 += normal[j] * normal[j];
        }
        if (norm2 <= 0.0) continue;  // identical vectors
        const double inv = 1.0 / std::sqrt(norm2);
        offset = 0.0;
        for (int j = 0; j < dim; ++j) {
          normal[j] *= inv;
          offset += normal[j] * (a[j] + b[j]) * 0.5;
        }
        neg.clear();
        pos.clear();
        for (const std::uint32_t it : items) {
          const double margin = dot(normal.data(), vec(it), dim) - offset;
          (margin >= 0.0 ? pos : neg).push_back(it);
        }
        split_ok = !neg.empty() && !pos.empty();
      }
      make_leaf = !split_ok;
    }

    if (make_leaf) {
      Node& nd = tree.nodes[task.node];
      nd.left = nd.right = -1;
      nd.begin = static_cast<std::int64_t>(tree.items.size());
      tree.items.insert(tree.items.end(), items.begin(), items.end());
      nd.end = static_cast<std::int64_t>(tree.items.size());
      continue;
    }

    const std::int32_t left = alloc_node();
    const std::int32_t right = alloc_node();
    Node& nd = tree.nodes[task.node];
    nd.left = left;
    nd.right = right;
    nd.offset = offset;
    std::copy(normal.begin(), normal.end(),
              tree.normals.begin() + static_cast<std::size_t>(task.node) * dim);
    pending.push_back({left, std::move(neg), task.depth + 1});
    pending.push_back({right, std::move(pos), task.depth + 1});
  }
  return tree;
}

std::vector<Neighbor> AnnForest::query(std::span<const double> q,
                                       const AnnQueryBudget& budget) const {
  if (trees_.empty() || ids_.empty()) throw state_error("AnnForest: empty forest");
  budget.validate(n_trees());
  if (static_cast<int>(q.size()) != dim_)
    throw param_error("AnnForest: query dimension mismatch");
  double qn = 0.0;
  for (const double x : q) qn += x * x;
  if (std::abs(std::sqrt(qn) - 1.0) > kUnitTolerance)
    throw param_error("AnnForest: query must be unit-norm");

  struct Entry {
    double key;
    std::int32_t tree;
    std::int32_t node;
    bool operator<(const Entry& o) const { return key < o.key; }  // max-heap
  };
  thread_local std::vector<Entry> frontier;
  frontier.clear();
  const double inf = std::numeric_limits<double>::infinity();
  for (std::int32_t t = 0; t < static_cast<std::int32_t>(trees_.size()); ++t)
    frontier.push_back({inf, t, 0});
  std::make_heap(frontier.begin(), frontier.end());
  auto frontier_pop = [&] {
    std::pop_heap(frontier.begin(), frontier.end());
    const Entry e = frontier.back();
    frontier.pop_back();
    return e;
  };
  auto frontier_push = [&](Entry e) {
    frontier.push_back(e);
    std::push_heap(frontier.begin(), frontier.end());
  };

  // stamped per-thread visited buffer; avoids a fresh memset per query
  thread_local std::vector<std::uint32_t> seen_stamp;
  thread_local std::uint32_t generation = 0;
  if (seen_stamp.size() < ids_.size()) seen_stamp.assign(ids_.size(), 0);
  if (++generation == 0) {
    std::fill(seen_stamp.begin(), seen_stamp.end(), 0);
    generation = 1;
  }

  // bounded worst-kept heap: top() is the weakest of the current top-k
  auto worse = [](const Neighbor& a, const Neighbor& b) { return better(a, b); };
  std::priority_queue<Neighbor, std::vector<Neighbor>, decltype(worse)> top(worse);

  int leaf_budget = budget.search_nodes;
  while (!frontier.empty() && leaf_budget > 0) {
    const Entry e = frontier_pop();
    const Tree& tree = trees_[e.tree];
    const Node& nd = tree.nodes[e.node];
    if (nd.left < 0) {
      --leaf_budget;
      for (std::int64_t i = nd.begin; i < nd.end; ++i) {
        const std::uint32_t item = tree.items[i];
        if (i + 1 < nd.end) __builtin_prefetch(vec(tree.items[i + 1]));
        if (seen_stamp[item] == generation) continue;
        seen_stamp[item] = generation;
        const Neighbor cand{ids_[item], dot(q.data(), vec(item), dim_)};
        if (top.size() < static_cast<std::size_t>(budget.k)) {
          top.push(cand);
        } else if (better(cand, top.top())) {
          top.pop();
          top.push(cand);
        }
      }
      continue;
    }
    const double* normal = &tree.normals[static_cast<std::size_t>(e.node) * dim_];
    const double margin = dot(normal, q.data(), dim_) - nd.offset;
    const std::int32_t near = margin >= 0.0 ? nd.right : nd.left;
    const std::int32_t far = margin >= 0.0 ? nd.left : nd.right;
    frontier_push({e.key, e.tree, near});
    frontier_push({std::min(e.key, std::abs(margin)), e.tree, far});
  }

  std::vector<Neighbor> out(top.size());
  for (std::size_t i = out.size(); i-- > 0;) {
    out[i] = top.top();
    top.pop();
  }
  return out;
}

std::vector<std::uint64_t> AnnForest::tree_members(int tree) const {
  std::vector<std::uint64_t> out;
  out.reserve(ids_.size());
  for (const std::uint32_t item : trees_.at(tree).items) out.push_back(ids_[item]);
  return out;
}

namespace {
constexpr char kForestMagic[4] = {'P', 'V', 'A', 'F'};
constexpr std::uint32_t kForestVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::istream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in.good()) throw corruption_error("ann forest: truncated file");
}

template <typename T>
void write_vec(std::ostream& out, const std::vector<T>& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
void read_vec(std::istream& in, std::vector<T>& v) {
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(T)));
  if (!in.good()) throw corruption_error("ann forest: truncated file");
}
}  // namespace

void AnnForest::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw format_error("cannot open for writing: " + path);
  f.write(kForestMagic, 4);
  write_pod(f, kForestVersion);
  write_pod(f, static_cast<std::uint32_t>(dim_));
  write_pod(f, static_cast<std::uint32_t>(trees_.size()));
  write_pod(f, static_cast<std::uint32_t>(leaf_cap_));
  write_pod(f, static_cast<std::uint64_t>(ids_.size()));
  write_pod(f, seed_);
  write_pod(f, stats_.mean_leaf_depth);
  write_pod(f, static_cast<std::uint32_t>(stats_.max_depth));
  write_pod(f, static_cast<std::uint64_t>(stats_.n_leaves));
  write_vec(f, ids_);
  write_vec(f, vectors_);
  for (const Tree& tree : trees_) {
    write_pod(f, static_cast<std::uint64_t>(tree.nodes.size()));
    for (std::size_t n = 0; n < tree.nodes.size(); ++n) {
      const Node& nd = tree.nodes[n];
      write_pod(f, nd.left);
      write_pod(f, nd.right);
      write_pod(f, nd.begin);
      write_pod(f, nd.end);
      if (nd.left >= 0) {
        write_pod(f, nd.offset);
        f.write(reinterpret_cast<const char*>(&tree.normals[n * dim_]),
                static_cast<std::streamsize>(sizeof(double) * dim_));
      }
    }
    write_pod(f, static_cast<std::uint64_t>(tree.items.size()));
    write_vec(f, tree.items);
  }
  if (!f.good()) throw format_error("write failed: " + path);
}

AnnForest AnnForest::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw dependency_error("cannot open ann forest: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f.good() || std::memcmp(magic, kForestMagic, 4) != 0)
    throw corruption_error("ann forest: bad magic");
  std::uint32_t version = 0;
  read_pod(f, version);
  if (version != kForestVersion)
    throw corruption_error("ann forest: unsupported format version");

  AnnForest forest;
  std::uint32_t dim = 0, n_trees = 0, leaf_cap = 0, max_depth = 0;
  std::uint64_t n_vectors = 0, n_leaves = 0;
  read_pod(f, dim);
  read_pod(f, n_trees);
  read_pod(f, leaf_cap);
  read_pod(f, n_vectors);
  read_pod(f, forest.seed_);
  read_pod(f, forest.stats_.mean_leaf_depth);
  read_pod(f, max_depth);
  read_pod(f, n_leaves);
  if (dim == 0 || n_trees == 0 || leaf_cap == 0 || n_vectors == 0)
    throw corruption_error("ann forest: implausible header");
  forest.dim_ = static_cast<int>(dim);
  forest.leaf_cap_ = static_cast<int>(leaf_cap);
  forest.stats_.max_depth = static_cast<int>(max_depth);
  forest.stats_.n_leaves = n_leaves;
  forest.ids_.resize(n_vectors);
  forest.vectors_.resize(n_vectors * dim);
  read_vec(f, forest.ids_);
  read_vec(f, forest.vectors_);
  forest.trees_.resize(n_trees);
  for (Tree& tree : forest.trees_) {
    std::uint64_t n_nodes = 0;
    read_pod(f, n_nodes);
    tree.nodes.resize(n_nodes);
    tree.normals.assign(n_nodes * dim, 0.0);
    for (std::size_t n = 0; n < n_nodes; ++n) {
      Node& nd = tree.nodes[n];
      read_pod(f, nd.left);
      read_pod(f, nd.right);
      read_pod(f, nd.begin);
      read_pod(f, nd.end);
      if (nd.left >= 0) {
        read_pod(f, nd.offset);
        f.read(reinterpret_cast<char*>(&tree.normals[n * dim]),
               static_cast<std::streamsize>(sizeof(double) * dim));
        if (!f.good()) throw corruption_error("ann forest: truncated normals");
      }
    }
    std::uint64_t n_items = 0;
    read_pod(f, n_items);
    tree.items.resize(n_items);
    read_vec(f, tree.items);
  }
  char extra = 0;
  f.read(&extra, 1);
  if (!f.eof()) throw corruption_error("ann forest: trailing bytes");
  return forest;
}

}  // namespace poiverify::annindex
