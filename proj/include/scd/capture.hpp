#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "scd/attention.hpp"

// Cost instrumentation and activation capture shared by the models, the
// rollout loop, and the probe suite.

namespace scd {

// Frame label for begin-of-sequence tokens in attention metadata.
inline constexpr index_t BOS_FRAME = -1;

// One block pass = one transformer block applied to one frame's tokens. A
// block run over F frames in parallel therefore counts F, which keeps the
// tally comparable between batched teacher forcing and frame-by-frame
// rollout.
struct InvocationCounters {
    index_t encoder_block_passes = 0;
    index_t decoder_block_passes = 0;
    index_t baseline_block_passes = 0;
    index_t encoder_invocations = 0;  // whole encoder forward calls

    index_t total_block_passes() const {
        return encoder_block_passes + decoder_block_passes + baseline_block_passes;
    }
    void reset() { *this = InvocationCounters{}; }
};

// Frame bookkeeping for one captured attention map: which frame each query
// row and key column belongs to (BOS_FRAME for begin-of-sequence tokens).
struct AttnMeta {
    index_t layer = 0;
    index_t step = 0;  // denoise step, 0 for encoder passes
    std::vector<index_t> query_frames;
    std::vector<index_t> key_frames;
};

template <class S>
struct CaptureHooks {
    bool want_features = false;
    bool want_attention = false;
    // (layer, denoise step, frame) -> that frame's activation rows after the block
    std::function<void(index_t, index_t, index_t, const Tensor<S>&)> on_feature;
    // one full attention map per block pass, with frame metadata
    std::function<void(const AttnMeta&, const AttnCapture<S>&)> on_attention;
};

namespace detail {

inline void bump(InvocationCounters* c, index_t InvocationCounters::*field, index_t n) {
    if (c) c->*field += n;
}

// Layer-skip flags: null means every layer runs; otherwise layer l runs iff
// flags[l] != 0 (a skipped block is bridged by the residual stream).
inline bool layer_active(const std::vector<std::uint8_t>* flags, size_t l, size_t depth,
                         const char* where) {
    if (!flags) return true;
    if (flags->size() != depth)
        throw ShapeError(std::string(where) + ": active-layer flag count does not match depth");
    return (*flags)[l] != 0;
}

}  // namespace detail

}  // namespace scd
