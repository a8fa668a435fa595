#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <set>

#include "specstream/tensor.hpp"
#include "specstream/tree.hpp"

using namespace specstream;

namespace {

Tensor<double> stream_logits_from(std::vector<std::vector<double>> rows) {
    Tensor<double> t({rows.size(), rows[0].size()});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < rows[i].size(); ++j) t(i, j) = rows[i][j];
    }
    return t;
}

// Ancestor-walk oracle: column allowed iff it is committed, an ancestor, or
// the node itself.
bool mask_matches_ancestor_walk(const TreeDraft& tree) {
    const std::size_t c = tree.committed_length;
    for (std::size_t i = 0; i < tree.size(); ++i) {
        for (std::size_t col = 0; col < c + tree.size(); ++col) {
            bool want;
            if (col < c) {
                want = true;
            } else {
                want = tree.is_ancestor_or_self(static_cast<int>(col - c), static_cast<int>(i));
            }
            const bool got = tree.mask(i, col) == 0.0f;
            if (got != want) return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("draft size formula instances") {
    CHECK(tree_draft_size(2, 2) == 7);
    CHECK(tree_draft_size(3, 1) == 4);
    CHECK(msa_batch_size(2, 2) == 21);
    CHECK(msa_batch_size(1, 1) == 4);
    CHECK(msa_batch_size(4, 3) == 605);
}

TEST_CASE("build_tree layers top-k tokens under every parent") {
    auto logits = stream_logits_from({{0.1, 0.9, 0.5, 0.2}, {0.3, 0.1, 0.2, 0.8}});
    auto tree = build_tree(7 % 4, logits, 2, 5);
    REQUIRE(tree.size() == 7);
    CHECK(tree.nodes[0].token == 3);
    CHECK(tree.nodes[0].parent == -1);
    // preorder: root, first depth-1 child and its subtree, then the sibling
    CHECK(tree.nodes[1].token == 1);  // top-1 of stream 1
    CHECK(tree.nodes[1].parent == 0);
    CHECK(tree.nodes[2].token == 3);  // top-1 of stream 2 under it
    CHECK(tree.nodes[2].parent == 1);
    CHECK(tree.nodes[3].token == 0);  // top-2 of stream 2
    CHECK(tree.nodes[3].parent == 1);
    CHECK(tree.nodes[4].token == 2);  // second depth-1 child
    CHECK(tree.nodes[4].parent == 0);
    CHECK(tree.nodes[5].parent == 4);
    CHECK(tree.nodes[6].parent == 4);
    for (std::size_t i = 1; i < tree.size(); ++i) {
        CHECK(tree.nodes[i].parent < static_cast<int>(i));
        CHECK(tree.nodes[i].depth ==
              tree.nodes[static_cast<std::size_t>(tree.nodes[i].parent)].depth + 1);
        CHECK(tree.nodes[i].stream == tree.nodes[i].depth);
    }
}

TEST_CASE("gamma=3 k=1 yields a chain; k=3 order follows topk") {
    auto logits3 = stream_logits_from({{0.5, 0.1, 0.2, 0.0},
                                       {0.0, 0.6, 0.1, 0.2},
                                       {0.1, 0.0, 0.9, 0.3}});
    auto chain = build_tree(0, logits3, 1, 0);
    REQUIRE(chain.size() == 4);
    for (std::size_t i = 1; i < 4; ++i) CHECK(chain.nodes[i].parent == static_cast<int>(i) - 1);

    auto logits1 = stream_logits_from({{0.1, 0.9, 0.5, 0.2}});
    auto t = build_tree(3, logits1, 3, 0);
    REQUIRE(t.size() == 4);
    CHECK(t.nodes[1].token == 1);
    CHECK(t.nodes[2].token == 2);
    CHECK(t.nodes[3].token == 3);
}

TEST_CASE("build_tree capacity error") {
    Tensor<double> logits({4, 4096});
    CHECK_THROWS_AS(build_tree(0, logits, 8, 0), CapacityError);
}

TEST_CASE("chain mask column counts") {
    auto logits = stream_logits_from({{1.0, 0.0}, {1.0, 0.0}});
    auto tree = build_tree(0, logits, 1, 2);  // chain of 3 nodes, committed=2
    REQUIRE(tree.size() == 3);
    std::size_t zeros = 0;
    for (std::size_t c = 0; c < tree.mask.cols(); ++c) {
        if (tree.mask(2, c) == 0.0f) ++zeros;
    }
    CHECK(zeros == 5);  // 2 committed + root + parent + self
}

TEST_CASE("siblings are mutually masked") {
    auto logits = stream_logits_from({{0.9, 0.5, 0.1}});
    auto tree = build_tree(0, logits, 2, 0);  // root + two siblings
    REQUIRE(tree.size() == 3);
    CHECK(tree.mask(1, 0 + 2) == neg_inf<float>());
    CHECK(tree.mask(2, 0 + 1) == neg_inf<float>());
    CHECK(tree.mask(1, 0 + 1) == 0.0f);
}

TEST_CASE("mask equals ancestor-walk oracle on random trees") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (int gamma = 1; gamma <= 4; ++gamma) {
        for (int k = 1; k <= 3; ++k) {
            Tensor<double> logits({static_cast<std::size_t>(gamma), 9});
            for (auto& v : logits.data()) v = dist(rng);
            auto tree = build_tree(4, logits, k, 3);
            CHECK(mask_matches_ancestor_walk(tree));
            // root-to-leaf path count = k^gamma
            std::size_t leaves = 0;
            for (std::size_t i = 0; i < tree.size(); ++i) {
                if (tree.nodes[i].depth == gamma) ++leaves;
            }
            std::size_t want = 1;
            for (int g = 0; g < gamma; ++g) want *= static_cast<std::size_t>(k);
            CHECK(leaves == want);
        }
    }
}

TEST_CASE("mask constancy across passes for fixed gamma,k") {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    Tensor<double> l1({2, 6});
    Tensor<double> l2({2, 6});
    for (auto& v : l1.data()) v = dist(rng);
    for (auto& v : l2.data()) v = dist(rng);
    auto a = build_tree(1, l1, 2, 4);
    auto b = build_tree(3, l2, 2, 9);
    REQUIRE(a.size() == b.size());
    // node-block structure is identical; committed columns are all zero
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < a.size(); ++j) {
            CHECK(a.mask(i, a.committed_length + j) == b.mask(i, b.committed_length + j));
        }
        for (std::size_t c = 0; c < b.committed_length; ++c) CHECK(b.mask(i, c) == 0.0f);
    }
}

TEST_CASE("prune thresholds: no-op at 0, root-only above 1") {
    auto logits = stream_logits_from({{0.9, 0.5, 0.1, 0.2}, {0.1, 0.2, 0.9, 0.4}});
    auto tree = build_tree(0, logits, 2, 0);
    Tensor<double> probs = Tensor<double>::filled({tree.size(), 4}, 0.25);

    auto same = prune(tree, probs, 0.0);
    CHECK(same.tree.size() == tree.size());
    for (std::size_t i = 0; i < tree.size(); ++i) CHECK(same.kept[i] == static_cast<int>(i));

    auto only_root = prune(tree, probs, 1.0 + 1e-9);
    CHECK(only_root.tree.size() == 1);
    CHECK(only_root.kept == std::vector<int>{0});
}

TEST_CASE("prune removes a child together with its subtree") {
    auto logits = stream_logits_from({{0.9, 0.5, 0.1, 0.2}, {0.1, 0.2, 0.9, 0.4}});
    auto tree = build_tree(3, logits, 2, 0);
    REQUIRE(tree.size() == 7);
    // preorder: 0 root; 1 = depth1 tok0; 2,3 its children; 4 = depth1 tok1; 5,6 children
    Tensor<double> probs = Tensor<double>::filled({7, 4}, 0.5);
    probs(0, tree.nodes[1].token < 4 ? static_cast<std::size_t>(tree.nodes[1].token) : 0) = 0.01;
    auto pruned = prune(tree, probs, 0.05);
    CHECK(pruned.tree.size() == 4);
    CHECK(pruned.kept == std::vector<int>{0, 4, 5, 6});
    CHECK(mask_matches_ancestor_walk(pruned.tree));
    // relative order and reindexed parents
    CHECK(pruned.tree.nodes[1].parent == 0);
    CHECK(pruned.tree.nodes[2].parent == 1);
    CHECK(pruned.tree.nodes[3].parent == 1);
}

TEST_CASE("pruning is monotone in tau") {
    std::mt19937_64 rng(29);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    auto logits = stream_logits_from({{0.9, 0.5, 0.1, 0.2, 0.3},
                                      {0.1, 0.2, 0.9, 0.4, 0.6},
                                      {0.4, 0.3, 0.2, 0.1, 0.8}});
    auto tree = build_tree(2, logits, 2, 0);
    Tensor<double> probs({tree.size(), 5});
    for (auto& v : probs.data()) v = dist(rng);
    std::vector<double> taus{0.0, 0.1, 0.3, 0.6, 0.9};
    std::vector<std::set<int>> kept_sets;
    for (double tau : taus) {
        auto pr = prune(tree, probs, tau);
        kept_sets.emplace_back(pr.kept.begin(), pr.kept.end());
    }
    for (std::size_t i = 1; i < kept_sets.size(); ++i) {
        for (int node : kept_sets[i]) CHECK(kept_sets[i - 1].count(node) == 1);
    }
}

TEST_CASE("make_chain is causal") {
    auto chain = make_chain({5, 6, 7}, 2);
    REQUIRE(chain.size() == 3);
    CHECK(mask_matches_ancestor_walk(chain));
    CHECK(chain.nodes[2].depth == 2);
}
