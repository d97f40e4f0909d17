#pragma once

#include <memory>
#include <vector>

#include "clamp/nn.hpp"

namespace clamp {

struct PredictorConfig {
    int stages = 3;
    int channels = 256;
    bool batch_norm = true;
};

/// Deconvolution head: `stages` x (4x4 stride-2 transposed conv, BN, ReLU)
/// then a 1x1 convolution to N heatmaps.
///
/// The input channels are declared as blocks (e.g. {C, N} for features and
/// score maps). The first transposed convolution is evaluated block by
/// block and summed, which equals one convolution over the concatenated
/// input and lets a head without the trailing blocks reproduce it exactly.
class KeypointPredictor : public nn::Module {
public:
    KeypointPredictor(std::vector<int> input_blocks, int num_keypoints, const PredictorConfig& config, Rng& rng);

    ag::Var forward(const ag::Var& x);

    int input_channels() const;
    const std::vector<int>& input_blocks() const { return blocks_; }
    int num_keypoints() const { return num_keypoints_; }
    int upsampling() const { return 1 << static_cast<int>(deconvs_.size()); }

    /// Copies every parameter and buffer from `other`, which must share the
    /// layout except for extra trailing input blocks; the first transposed
    /// convolution keeps only the rows of this head's input channels.
    void copy_from(const KeypointPredictor& other);

    /// Zeroes the first-layer weights that read input block `block`.
    void zero_input_block(int block);

    nn::Conv2d final_layer;

private:
    std::vector<int> blocks_;
    int num_keypoints_;
    std::vector<std::unique_ptr<nn::ConvTranspose2d>> deconvs_;
    std::vector<std::unique_ptr<nn::BatchNorm2d>> norms_;
};

}  // namespace clamp
