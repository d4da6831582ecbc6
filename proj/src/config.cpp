#include "cosam/config.hpp"

#include <nlohmann/json.hpp>

#include <stdexcept>

namespace cosam {

using json = nlohmann::json;

void ModelConfig::validate() const {
    if (window_size < 1 || window_size % 2 == 0)
        throw std::invalid_argument("ModelConfig: window_size must be odd and >= 1");
    if (feat_dim < n_heads || feat_dim % n_heads != 0)
        throw std::invalid_argument("ModelConfig: feat_dim must be a multiple of n_heads");
    if (feat_dim % 8 != 0 || seg_dim % 8 != 0)
        throw std::invalid_argument("ModelConfig: feat_dim and seg_dim must be multiples of 8");
    if (n_queries < 1 || top_m < 1 || roi_pool_size < 1)
        throw std::invalid_argument("ModelConfig: n_queries, top_m, roi_pool_size must be >= 1");
    if (backbone_stride < 1 || (backbone_stride & (backbone_stride - 1)) != 0)
        throw std::invalid_argument("ModelConfig: backbone_stride must be a power of two");
    if (seg_down_stages < 1)
        throw std::invalid_argument("ModelConfig: seg_down_stages must be >= 1");
}

std::string ModelConfig::to_json() const {
    json j;
    j["window_size"] = window_size;
    j["feat_dim"] = feat_dim;
    j["n_queries"] = n_queries;
    j["top_m"] = top_m;
    j["backbone_stride"] = backbone_stride;
    j["roi_pool_size"] = roi_pool_size;
    j["encoder_layers"] = encoder_layers;
    j["decoder_layers"] = decoder_layers;
    j["n_heads"] = n_heads;
    j["proposal_base_scale"] = proposal_base_scale;
    j["seg_dim"] = seg_dim;
    j["seg_down_stages"] = seg_down_stages;
    j["joint_hidden"] = joint_hidden;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& json_text) {
    const json j = json::parse(json_text);
    ModelConfig cfg;
    cfg.window_size = j.value("window_size", cfg.window_size);
    cfg.feat_dim = j.value("feat_dim", cfg.feat_dim);
    cfg.n_queries = j.value("n_queries", cfg.n_queries);
    cfg.top_m = j.value("top_m", cfg.top_m);
    cfg.backbone_stride = j.value("backbone_stride", cfg.backbone_stride);
    cfg.roi_pool_size = j.value("roi_pool_size", cfg.roi_pool_size);
    cfg.encoder_layers = j.value("encoder_layers", cfg.encoder_layers);
    cfg.decoder_layers = j.value("decoder_layers", cfg.decoder_layers);
    cfg.n_heads = j.value("n_heads", cfg.n_heads);
    cfg.proposal_base_scale = j.value("proposal_base_scale", cfg.proposal_base_scale);
    cfg.seg_dim = j.value("seg_dim", cfg.seg_dim);
    cfg.seg_down_stages = j.value("seg_down_stages", cfg.seg_down_stages);
    cfg.joint_hidden = j.value("joint_hidden", cfg.joint_hidden);
    cfg.validate();
    return cfg;
}

}  // namespace cosam
