#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "specstream/errors.hpp"
#include "specstream/tensor.hpp"

namespace specstream {

/// Per-layer committed main-stream K/V store. A tree pass appends rows for
/// its flattened nodes (possibly fewer rows in layers above the pruning
/// point); commit() then compacts the accepted root-to-node path in place and
/// discards the rest — backtracking is lazy, nothing is recomputed. Stream
/// K/V are never stored.
template <typename T>
class KVCache {
public:
    KVCache(int num_layers, std::size_t capacity, std::size_t hidden)
        : capacity_(capacity), hidden_(hidden) {
        layers_.resize(static_cast<std::size_t>(num_layers));
        for (auto& l : layers_) {
            l.keys = Tensor<T>({capacity, hidden});
            l.values = Tensor<T>({capacity, hidden});
        }
    }

    std::size_t committed_length() const { return committed_; }
    std::size_t capacity() const { return capacity_; }
    int num_layers() const { return static_cast<int>(layers_.size()); }

    std::size_t speculative_extent(int layer) const {
        return layers_.at(static_cast<std::size_t>(layer)).node_ids.size();
    }

    /// Rows visible to attention in `layer` right now (committed + this
    /// pass's speculative rows), as contiguous [rows x hidden] storage.
    std::size_t visible_rows(int layer) const {
        return committed_ + speculative_extent(layer);
    }
    const Tensor<T>& keys(int layer) const { return layers_.at(static_cast<std::size_t>(layer)).keys; }
    const Tensor<T>& values(int layer) const { return layers_.at(static_cast<std::size_t>(layer)).values; }

    void append_speculative(int layer, const Tensor<T>& k_rows, const Tensor<T>& v_rows,
                            const std::vector<int>& node_ids) {
        auto& l = layers_.at(static_cast<std::size_t>(layer));
        if (!l.node_ids.empty()) {
            throw LogicError("append_speculative: layer " + std::to_string(layer) +
                             " already holds uncommitted rows (one tree pass at a time)");
        }
        if (k_rows.rows() != node_ids.size() || v_rows.rows() != node_ids.size() ||
            k_rows.cols() != hidden_ || v_rows.cols() != hidden_) {
            throw ShapeError("append_speculative: row shape mismatch");
        }
        if (committed_ + node_ids.size() > capacity_) {
            throw CapacityError("append_speculative: cache capacity " + std::to_string(capacity_) +
                                " exceeded");
        }
        for (std::size_t i = 0; i < node_ids.size(); ++i) {
            std::copy(k_rows.row(i), k_rows.row(i) + hidden_, l.keys.row(committed_ + i));
            std::copy(v_rows.row(i), v_rows.row(i) + hidden_, l.values.row(committed_ + i));
        }
        l.node_ids = node_ids;
    }

    /// Compact the accepted root-to-node path (given as flattened node ids of
    /// the last pass, root first) into consecutive committed positions and
    /// drop every other speculative row.
    void commit(const std::vector<int>& accepted_path) {
        for (std::size_t i = 1; i < accepted_path.size(); ++i) {
            if (accepted_path[i] <= accepted_path[i - 1]) {
                throw LogicError("commit: accepted path must be an ancestor chain (increasing ids)");
            }
        }
        // Validate everywhere before mutating anything.
        for (std::size_t li = 0; li < layers_.size(); ++li) {
            for (int id : accepted_path) {
                if (row_of(layers_[li], id) < 0) {
                    throw LogicError("commit: node " + std::to_string(id) +
                                     " has no row in layer " + std::to_string(li) +
                                     " (pruned or never appended)");
                }
            }
        }
        for (auto& l : layers_) {
            std::size_t dst = committed_;
            for (int id : accepted_path) {
                const auto src = committed_ + static_cast<std::size_t>(row_of(l, id));
                if (src != dst) {
                    std::copy(l.keys.row(src), l.keys.row(src) + hidden_, l.keys.row(dst));
                    std::copy(l.values.row(src), l.values.row(src) + hidden_, l.values.row(dst));
                }
                ++dst;
            }
            l.node_ids.clear();
        }
        committed_ += accepted_path.size();
    }

    /// Drop all speculative rows without committing.
    void discard_speculative() {
        for (auto& l : layers_) l.node_ids.clear();
    }

private:
    struct Layer {
        Tensor<T> keys, values;     // [capacity x hidden]
        std::vector<int> node_ids;  // flattened-tree ids of the uncommitted rows
    };

    int row_of(const Layer& l, int node_id) const {
        for (std::size_t i = 0; i < l.node_ids.size(); ++i) {
            if (l.node_ids[i] == node_id) return static_cast<int>(i);
        }
        return -1;
    }

    std::vector<Layer> layers_;
    std::size_t committed_ = 0;
    std::size_t capacity_ = 0;
    std::size_t hidden_ = 0;
};

}  // namespace specstream
