#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "lvr/checkpoint.hpp"
#include "lvr/config.hpp"
#include "lvr/image_ops.hpp"
#include "lvr/metrics.hpp"
#include "lvr/png.hpp"
#include "lvr/pretrain.hpp"
#include "lvr/synthdata.hpp"
#include "lvr/vit.hpp"

namespace lvr {

/// Which encoder blocks to tap and the pyramid scale (image_size / divisor)
/// each tap is resized to.
struct TapSpec {
    std::vector<std::size_t> blocks;               // 1-based, ascending
    std::vector<std::size_t> scale_divisors = {4, 8, 16, 32};
};

/// Per-tap lateral projections plus the pixel classifier.
template <typename S>
struct SegHead {
    std::vector<LinearLayer<S>> lateral;
    LinearLayer<S> classifier;

    static SegHead init(ParamStore<S>& store, const std::string& prefix, std::size_t taps, std::size_t enc_dim,
                        std::size_t fpn_dim, std::size_t num_classes, Rng& rng) {
        SegHead h;
        for (std::size_t i = 0; i < taps; ++i)
            h.lateral.push_back(LinearLayer<S>::init(store, prefix + ".lateral" + std::to_string(i), enc_dim, fpn_dim, rng));
        h.classifier = LinearLayer<S>::init(store, prefix + ".classifier", fpn_dim, num_classes, rng);
        return h;
    }
};

/// Encoder plus segmentation head for finetuning. Encoder parameters keep
/// their pretraining names (student.*), so checkpoints restore directly.
template <typename S>
struct SegModel {
    StackConfig enc_cfg;
    std::size_t channels = 1, image_size = 0, grid_h = 0, grid_w = 0;
    std::size_t num_classes = 4, fpn_dim = 64;
    TapSpec taps;
    ParamStore<S> params;
    LinearLayer<S> patch_proj;
    Tensor<S> pos_table;
    EncoderStack<S> encoder;
    SegHead<S> head;

    static SegModel build(const RunConfig& cfg, std::uint64_t init_seed) {
        cfg.validate();
        SegModel m;
        m.enc_cfg = {cfg.encoder_depth, cfg.encoder_dim, cfg.encoder_heads, cfg.mlp_ratio, cfg.patch_size};
        m.channels = cfg.channels;
        m.image_size = cfg.image_size;
        m.grid_h = cfg.grid_h();
        m.grid_w = cfg.grid_w();
        m.num_classes = cfg.num_classes;
        m.fpn_dim = cfg.fpn_dim;
        m.taps.blocks = cfg.effective_taps();
        m.taps.scale_divisors.resize(m.taps.blocks.size());
        for (std::size_t i = 0; i < m.taps.blocks.size(); ++i) {
            std::size_t div = std::min<std::size_t>(4u << i, cfg.image_size);
            std::size_t target = cfg.image_size / div;
            std::size_t grid = cfg.grid_h();
            bool ok = target >= 1 && div * target == cfg.image_size &&
                      (target >= grid ? target % grid == 0 : grid % target == 0);
            if (!ok)
                throw ConfigError("pyramid scale 1/" + std::to_string(div) + " incompatible with image " +
                                  std::to_string(cfg.image_size) + " and patch " + std::to_string(cfg.patch_size));
            m.taps.scale_divisors[i] = div;
        }
        Rng rng(init_seed);
        std::size_t patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size;
        m.patch_proj = LinearLayer<S>::init(m.params, "student.patch_proj", patch_dim, cfg.encoder_dim, rng);
        m.pos_table = sincos_pos_table<S>(m.grid_h, m.grid_w, cfg.encoder_dim);
        m.encoder = EncoderStack<S>::init(m.params, "student.encoder", m.enc_cfg, rng);
        m.head = SegHead<S>::init(m.params, "head", m.taps.blocks.size(), cfg.encoder_dim, cfg.fpn_dim,
                                  cfg.num_classes, rng);
        return m;
    }

    /// Pretrained encoder weights in, decoder and mask token dropped.
    void load_encoder(const LoadedCheckpoint& ckpt) { restore_params(ckpt, params, "student."); }
};

/// Intermediate activations at the configured blocks, each reshaped to a
/// (gh, gw, D) map. Finetuning runs with no masking: all tokens visible.
template <typename S>
std::vector<Tensor<S>> tap_features(const SegModel<S>& m, const Tensor<S>& image) {
    TokenGrid<S> raw = patchify(image, m.enc_cfg.patch_size);
    if (raw.grid_h != m.grid_h || raw.grid_w != m.grid_w)
        throw std::invalid_argument("tap_features: image grid does not match model");
    TokenGrid<S> embedded = embed(raw, m.patch_proj, m.pos_table);
    auto acts = m.encoder.forward_with_taps(embedded.tokens, m.taps.blocks);
    std::vector<Tensor<S>> maps;
    maps.reserve(acts.size());
    for (auto& a : acts) maps.push_back(reshape(a, {m.grid_h, m.grid_w, m.enc_cfg.dim}));
    return maps;
}

namespace detail {

template <typename S>
Tensor<S> resize_to(const Tensor<S>& map, std::size_t target_h, std::size_t target_w) {
    std::size_t h = map.dim(0), w = map.dim(1);
    if (target_h == h && target_w == w) return map;
    if (target_h >= h) {
        if (target_h % h != 0 || target_w % w != 0 || target_h / h != target_w / w)
            throw ConfigError("pyramid resize: cannot upsample " + shape_str(map.shape()) + " to " +
                              std::to_string(target_h) + "x" + std::to_string(target_w));
        return nearest_upsample(map, target_h / h);
    }
    if (h % target_h != 0 || w % target_w != 0 || h / target_h != w / target_w)
        throw ConfigError("pyramid resize: cannot downsample " + shape_str(map.shape()) + " to " +
                          std::to_string(target_h) + "x" + std::to_string(target_w));
    return stride_downsample(map, h / target_h);
}

}  // namespace detail

/// Resize each tap to its pyramid scale, project laterally to fpn_dim, fuse
/// top-down by addition, and return the merged finest (1/4 scale) map.
template <typename S>
Tensor<S> pyramid_fuse(const SegModel<S>& m, const std::vector<Tensor<S>>& maps) {
    if (maps.empty()) throw std::invalid_argument("pyramid_fuse: no feature maps");
    if (maps.size() != m.taps.blocks.size())
        throw std::invalid_argument("pyramid_fuse: got " + std::to_string(maps.size()) + " maps for " +
                                    std::to_string(m.taps.blocks.size()) + " taps");
    std::vector<Tensor<S>> levels(maps.size());
    for (std::size_t i = 0; i < maps.size(); ++i) {
        std::size_t div = m.taps.scale_divisors[i];
        Tensor<S> resized = detail::resize_to(maps[i], m.image_size / div, m.image_size / div);
        levels[i] = m.head.lateral[i].forward(resized);
    }
    Tensor<S> acc = levels.back();
    for (std::size_t i = levels.size() - 1; i-- > 0;) {
        std::size_t up = levels[i].dim(0) / acc.dim(0);
        acc = add(levels[i], up > 1 ? nearest_upsample(acc, up) : acc);
    }
    return acc;  // [H/4, W/4, fpn_dim]
}

/// Per-pixel class logits in [H, W, K] layout (the row layout the loss
/// consumes); tap -> fuse -> classify -> bilinear x4.
template <typename S>
Tensor<S> segment_logits_hwk(const SegModel<S>& m, const Tensor<S>& image) {
    Tensor<S> fused = pyramid_fuse(m, tap_features(m, image));
    Tensor<S> logits = m.head.classifier.forward(fused);  // [H/4, W/4, K]
    return bilinear_upsample(logits, m.image_size / logits.dim(0));
}

/// External layout contract: logits as [num_classes, H, W].
template <typename S>
Tensor<S> segment(const SegModel<S>& m, const Tensor<S>& image) {
    Tensor<S> hwk = segment_logits_hwk(m, image);
    return transpose(transpose(hwk, 0, 2), 1, 2);  // [H,W,K] -> [K,H,W]
}

/// Argmax labels from [H,W,K] logits.
template <typename S>
std::vector<std::uint8_t> predict_labels(const Tensor<S>& logits_hwk) {
    std::size_t h = logits_hwk.dim(0), w = logits_hwk.dim(1), k = logits_hwk.dim(2);
    std::vector<std::uint8_t> out(h * w);
    const S* p = logits_hwk.values().data();
    for (std::size_t i = 0; i < h * w; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
            if (p[i * k + c] > p[i * k + best]) best = c;
        out[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

// ---------------------------------------------------------------------------
// mIoU

struct IouReport {
    std::vector<double> per_class;   // NaN for classes absent from both sides
    std::vector<bool> counted;       // whether the class enters the mean
    double mean = 0.0;
};

/// Accumulates per-class intersection/union pixel counts across samples.
/// Classes absent from both ground truth and prediction over the whole set
/// are excluded from the mean.
class IouAccumulator {
  public:
    explicit IouAccumulator(std::size_t num_classes) : inter_(num_classes, 0), uni_(num_classes, 0) {}

    void add(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
        if (pred.size() != gt.size())
            throw std::invalid_argument("miou: prediction and ground truth sizes differ (" +
                                        std::to_string(pred.size()) + " vs " + std::to_string(gt.size()) + ")");
        std::size_t k = inter_.size();
        for (std::size_t i = 0; i < pred.size(); ++i) {
            if (pred[i] >= k || gt[i] >= k) throw std::out_of_range("miou: label exceeds class count");
            if (pred[i] == gt[i]) ++inter_[pred[i]];
            ++uni_[pred[i]];
            if (pred[i] != gt[i]) ++uni_[gt[i]];
        }
    }

    IouReport report() const {
        IouReport r;
        r.per_class.resize(inter_.size());
        r.counted.resize(inter_.size());
        double sum = 0;
        std::size_t n = 0;
        for (std::size_t c = 0; c < inter_.size(); ++c) {
            if (uni_[c] == 0) {
                r.per_class[c] = std::numeric_limits<double>::quiet_NaN();
                r.counted[c] = false;
                continue;
            }
            r.per_class[c] = static_cast<double>(inter_[c]) / static_cast<double>(uni_[c]);
            r.counted[c] = true;
            sum += r.per_class[c];
            ++n;
        }
        r.mean = n ? sum / static_cast<double>(n) : 0.0;
        return r;
    }

  private:
    std::vector<std::uint64_t> inter_, uni_;
};

inline IouReport miou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
                      std::size_t num_classes) {
    IouAccumulator acc(num_classes);
    acc.add(pred, gt);
    return acc.report();
}

inline void write_iou_csv(const IouReport& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << "class_name,iou\n";
    for (std::size_t c = 0; c < r.per_class.size(); ++c) {
        out << class_name(c) << ",";
        if (r.counted[c])
            out << r.per_class[c];
        else
            out << "excluded";
        out << "\n";
    }
    out << "mean," << r.mean << "\n";
}

/// Indexed PNG of a label raster: background black, vias blue, wires
/// purple, pads green.
inline void export_label_png(const std::vector<std::uint8_t>& labels, std::size_t h, std::size_t w,
                             const std::string& path) {
    static const std::vector<std::array<std::uint8_t, 3>> palette = {
        {0, 0, 0}, {60, 100, 255}, {170, 60, 240}, {60, 200, 90}};
    png_write_indexed(path, w, h, palette, labels);
}

// ---------------------------------------------------------------------------
// Finetuning

struct FinetuneResult {
    double test_miou = 0.0;
    std::vector<double> val_miou_per_epoch;
    IouReport test_report;
    std::string checkpoint_path;
    std::string eval_csv_path;
};

/// Evaluate mIoU over a list of samples (parallel across images).
template <typename S>
IouReport evaluate_miou(const SegModel<S>& m, const DatasetManifest& data, const std::vector<ManifestEntry>& entries,
                        std::size_t threads = 1) {
    std::vector<std::vector<std::uint8_t>> preds(entries.size());
    std::vector<std::vector<std::uint8_t>> gts(entries.size());
    detail::parallel_for(entries.size(), threads, [&](std::size_t i) {
        NoGradGuard ng;
        auto sample = data.materialize<S>(entries[i]);
        preds[i] = predict_labels(segment_logits_hwk(m, sample.image));
        gts[i] = std::move(sample.labels);
    });
    IouAccumulator acc(m.num_classes);
    for (std::size_t i = 0; i < entries.size(); ++i) acc.add(preds[i], gts[i]);
    return acc.report();
}

/// Full finetuning: all parameters train (encoder and head), per-pixel
/// cross-entropy, warmup+cosine schedule, per-epoch validation mIoU, final
/// test evaluation and CSV report.
template <typename S>
FinetuneResult finetune_loop(const RunConfig& cfg, const DatasetManifest& data, const LoadedCheckpoint* pretrained,
                             const std::string& run_dir, MetricsWriter& metrics) {
    cfg.validate();
    auto train_all = data.split("train");
    if (train_all.empty()) throw DataError("finetune: empty train split");
    std::vector<ManifestEntry> train(train_all.begin(),
                                     train_all.begin() + std::min(cfg.finetune_train_count, train_all.size()));
    auto val = data.split("val");
    auto test = data.split("test");

    SegModel<S> model = SegModel<S>::build(cfg, seed_mix(cfg.seed, "init.finetune"));
    if (pretrained) model.load_encoder(*pretrained);
    AdamWState<S> opt;
    opt.init(model.params);

    std::vector<SegSample<S>> samples(train.size());
    detail::parallel_for(train.size(), cfg.threads,
                         [&](std::size_t i) { samples[i] = data.materialize<S>(train[i]); });
    for (auto& s : samples)
        for (auto l : s.labels)
            if (l >= cfg.num_classes) throw DataError("finetune: label id exceeds num_classes");

    const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * cfg.finetune_epochs;
    const std::size_t warmup_steps = steps_per_epoch * cfg.finetune_warmup_epochs;

    FinetuneResult result;
    std::size_t global_step = 0;
    for (std::size_t epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
        std::vector<std::size_t> order(train.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng order_rng(seed_mix(cfg.seed, "ft.order", epoch));
        order_rng.shuffle(order);

        for (std::size_t s = 0; s < steps_per_epoch; ++s, ++global_step) {
            auto t0 = std::chrono::steady_clock::now();
            std::size_t begin = s * cfg.batch_size;
            std::size_t end = std::min(begin + cfg.batch_size, train.size());
            Tensor<S> batch_loss;
            for (std::size_t b = begin; b < end; ++b) {
                const auto& sample = samples[order[b]];
                Tensor<S> logits = segment_logits_hwk(model, sample.image);
                Tensor<S> rows = reshape(logits, {sample.height * sample.width, cfg.num_classes});
                std::vector<std::size_t> labels(sample.labels.begin(), sample.labels.end());
                Tensor<S> li = cross_entropy(rows, labels);
                batch_loss = batch_loss.defined() ? add(batch_loss, li) : li;
            }
            batch_loss = scale(batch_loss, S(1) / static_cast<S>(end - begin));
            double loss_value = static_cast<double>(batch_loss.item());
            if (!std::isfinite(loss_value))
                throw NumericalError("non-finite finetune loss at epoch " + std::to_string(epoch) + " step " +
                                     std::to_string(global_step));
            backward(batch_loss);
            double lr = cosine_warmup_lr(cfg.finetune_lr, global_step, warmup_steps, total_steps);
            adamw_step(model.params, opt, static_cast<S>(lr), static_cast<S>(cfg.beta1), static_cast<S>(cfg.beta2),
                       static_cast<S>(1e-8), static_cast<S>(cfg.weight_decay));
            model.params.zero_grad();
            double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            metrics.step_row(global_step + 1, epoch, loss_value, lr, seconds, "finetune");
        }

        if (!val.empty()) {
            auto rep = evaluate_miou(model, data, val, cfg.threads);
            result.val_miou_per_epoch.push_back(rep.mean);
            metrics.event("eval", {{"epoch", epoch}, {"split", "val"}, {"miou", rep.mean}});
        }
    }

    namespace fs = std::filesystem;
    if (!test.empty()) {
        result.test_report = evaluate_miou(model, data, test, cfg.threads);
        result.test_miou = result.test_report.mean;
        metrics.event("eval", {{"epoch", cfg.finetune_epochs}, {"split", "test"}, {"miou", result.test_miou}});
        result.eval_csv_path = (fs::path(run_dir) / "eval.csv").string();
        write_iou_csv(result.test_report, result.eval_csv_path);
    }
    result.checkpoint_path = (fs::path(run_dir) / "finetune.ckpt").string();
    save_checkpoint(result.checkpoint_path, cfg.echo(), model.params, &opt, cfg.finetune_epochs, global_step,
                    cfg.seed);
    return result;
}

}  // namespace lvr
