#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "scd/common.hpp"

// Frame-structured attention masks. Tokens are laid out frame-major: token
// index = frame * tokens_per_frame + offset. The teacher-forcing mask works
// on the interleaved sequence [clean_1, noisy_1, clean_2, noisy_2, ...] of
// 2N frame slots.

namespace scd {

enum class MaskKind { bidirectional, frame_causal, frame_diagonal, teacher_forcing_interleaved };

inline std::string mask_kind_name(MaskKind k) {
    switch (k) {
        case MaskKind::bidirectional: return "bidirectional";
        case MaskKind::frame_causal: return "frame_causal";
        case MaskKind::frame_diagonal: return "frame_diagonal";
        case MaskKind::teacher_forcing_interleaved: return "teacher_forcing_interleaved";
    }
    return "?";
}

struct Mask {
    index_t rows = 0, cols = 0;
    std::vector<std::uint8_t> allowed;  // row-major, 1 = attention permitted

    bool at(index_t q, index_t k) const {
        return allowed[static_cast<size_t>(q * cols + k)] != 0;
    }
    std::uint8_t& at_mut(index_t q, index_t k) {
        return allowed[static_cast<size_t>(q * cols + k)];
    }

    static Mask all_true(index_t rows, index_t cols) {
        Mask m;
        m.rows = rows;
        m.cols = cols;
        m.allowed.assign(static_cast<size_t>(rows * cols), 1);
        return m;
    }
};

// For the three plain kinds the matrix covers num_frames frame slots; the
// teacher-forcing kind covers 2*num_frames interleaved slots.
inline Mask build_mask(index_t num_frames, index_t tokens_per_frame, MaskKind kind) {
    if (num_frames < 1 || tokens_per_frame < 1)
        throw ConfigError("build_mask: counts must be positive");
    const bool interleaved = kind == MaskKind::teacher_forcing_interleaved;
    const index_t slots = interleaved ? 2 * num_frames : num_frames;
    const index_t n = slots * tokens_per_frame;
    Mask m;
    m.rows = m.cols = n;
    m.allowed.assign(static_cast<size_t>(n * n), 0);
    for (index_t q = 0; q < n; ++q) {
        const index_t qs = q / tokens_per_frame;  // frame slot of the query
        for (index_t k = 0; k < n; ++k) {
            const index_t ks = k / tokens_per_frame;
            bool ok = false;
            switch (kind) {
                case MaskKind::bidirectional: ok = true; break;
                case MaskKind::frame_causal: ok = ks <= qs; break;
                case MaskKind::frame_diagonal: ok = ks == qs; break;
                case MaskKind::teacher_forcing_interleaved: {
                    // slot 2i = clean_{i+1}, slot 2i+1 = noisy_{i+1}
                    const index_t qi = qs / 2, ki = ks / 2;
                    const bool q_clean = (qs % 2 == 0), k_clean = (ks % 2 == 0);
                    if (q_clean)
                        ok = k_clean && ki <= qi;
                    else
                        ok = (k_clean && ki < qi) || (!k_clean && ki == qi);
                    break;
                }
            }
            if (ok) m.at_mut(q, k) = 1;
        }
    }
    return m;
}

}  // namespace scd
