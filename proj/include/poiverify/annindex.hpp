#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "poiverify/util.hpp"

namespace poiverify::annindex {

struct AnnQueryBudget {
  int k = 1;              // neighbors requested
  int search_nodes = 512; // leaf visits allowed across the whole forest

  void validate(int n_trees) const {
    if (k < 1) throw param_error("AnnQueryBudget: k must be >= 1");
    if (search_nodes < n_trees)
      throw param_error("AnnQueryBudget: search_nodes must be >= n_trees");
  }
};

struct Neighbor {
  std::uint64_t id = 0;
  double score = 0.0;  // exact cosine (inner product of unit vectors)
};

using EmbeddingSet = std::vector<std::pair<std::uint64_t, std::vector<double>>>;

// Exact top-k scan; the oracle the forest is checked against.
std::vector<Neighbor> brute_force_knn(const EmbeddingSet& embeddings,
                                      std::span<const double> q, std::size_t k);

// Forest of two-point-bisector partition trees over unit vectors. Candidate
// generation is approximate; scoring is always the exact cosine.
class AnnForest {
 public:
  struct BuildStats {
    double mean_leaf_depth = 0.0;  // item-weighted
    int max_depth = 0;
    std::size_t n_leaves = 0;
  };

  static AnnForest build(const EmbeddingSet& embeddings, int n_trees, int leaf_cap,
                         std::uint64_t seed, int threads = 1);

  std::vector<Neighbor> query(std::span<const double> q,
                              const AnnQueryBudget& budget) const;

  std::size_t size() const { return ids_.size(); }
  int dim() const { return dim_; }
  int n_trees() const { return static_cast<int>(trees_.size()); }
  int leaf_cap() const { return leaf_cap_; }
  const BuildStats& stats() const { return stats_; }

  // audit: every id appears exactly once per tree
  std::vector<std::uint64_t> tree_members(int tree) const;

  void save(const std::string& path) const;
  static AnnForest load(const std::string& path);

 private:
  struct Node {
    std::int32_t left = -1;   // negative-side child; -1 for leaf
    std::int32_t right = -1;  // positive-side child
    std::int64_t begin = 0;   // leaf item range
    std::int64_t end = 0;
    double offset = 0.0;      // unit normal stored separately
  };
  struct Tree {
    std::vector<Node> nodes;
    std::vector<double> normals;      // one dim-sized row per node (leaf rows zero)
    std::vector<std::uint32_t> items; // vector indices grouped by leaf
  };

  const double* vec(std::size_t index) const {
    return &vectors_[index * static_cast<std::size_t>(dim_)];
  }
  Tree build_tree(std::uint64_t tree_seed) const;

  int dim_ = 0;
  int leaf_cap_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<std::uint64_t> ids_;  // ascending; vector table row order
  std::vector<double> vectors_;     // n x dim
  std::vector<Tree> trees_;
  BuildStats stats_;
};

}  // namespace poiverify::annindex
