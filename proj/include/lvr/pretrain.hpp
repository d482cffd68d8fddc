#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "lvr/checkpoint.hpp"
#include "lvr/config.hpp"
#include "lvr/metrics.hpp"
#include "lvr/mve.hpp"
#include "lvr/optim.hpp"
#include "lvr/synthdata.hpp"
#include "lvr/vit.hpp"

namespace lvr {

/// Student: masked global encoder, then per-window decoding of the
/// assembled grid. The decoder has its own width; dec_in/dec_out bridge
/// encoder dim -> decoder dim -> target feature dim.
template <typename S>
struct StudentModel {
    StackConfig enc_cfg, dec_cfg;
    std::size_t channels = 1, grid_h = 0, grid_w = 0;
    ParamStore<S> params;
    LinearLayer<S> patch_proj;
    Tensor<S> pos_table;  // fixed sine-cosine, not a parameter
    EncoderStack<S> encoder;
    Tensor<S> mask_token;
    LinearLayer<S> dec_in;
    EncoderStack<S> decoder;
    LinearLayer<S> dec_out;

    static StudentModel build(const RunConfig& cfg, std::uint64_t init_seed) {
        StudentModel m;
        m.enc_cfg = {cfg.encoder_depth, cfg.encoder_dim, cfg.encoder_heads, cfg.mlp_ratio, cfg.patch_size};
        m.dec_cfg = {cfg.decoder_depth, cfg.decoder_dim, cfg.decoder_heads, cfg.mlp_ratio, cfg.patch_size};
        m.channels = cfg.channels;
        m.grid_h = cfg.grid_h();
        m.grid_w = cfg.grid_w();
        Rng rng(init_seed);
        std::size_t patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size;
        m.patch_proj = LinearLayer<S>::init(m.params, "student.patch_proj", patch_dim, cfg.encoder_dim, rng);
        m.pos_table = sincos_pos_table<S>(m.grid_h, m.grid_w, cfg.encoder_dim);
        m.encoder = EncoderStack<S>::init(m.params, "student.encoder", m.enc_cfg, rng);
        m.mask_token = m.params.add("student.mask_token", Tensor<S>::trunc_normal({cfg.encoder_dim}, rng, 0.02));
        m.dec_in = LinearLayer<S>::init(m.params, "student.dec_in", cfg.encoder_dim, cfg.decoder_dim, rng);
        m.decoder = EncoderStack<S>::init(m.params, "student.decoder", m.dec_cfg, rng);
        m.dec_out = LinearLayer<S>::init(m.params, "student.dec_out", cfg.decoder_dim, cfg.encoder_dim, rng);
        return m;
    }
};

/// Teacher: same encoder architecture, no decoder, no mask token. All
/// parameters are non-trainable; forwards run without tape.
template <typename S>
struct TeacherModel {
    StackConfig enc_cfg;
    std::size_t channels = 1, grid_h = 0, grid_w = 0;
    ParamStore<S> params;
    LinearLayer<S> patch_proj;
    Tensor<S> pos_table;
    EncoderStack<S> encoder;

    static TeacherModel build(const RunConfig& cfg, std::uint64_t init_seed) {
        TeacherModel m;
        m.enc_cfg = {cfg.encoder_depth, cfg.encoder_dim, cfg.encoder_heads, cfg.mlp_ratio, cfg.patch_size};
        m.channels = cfg.channels;
        m.grid_h = cfg.grid_h();
        m.grid_w = cfg.grid_w();
        Rng rng(init_seed);
        std::size_t patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size;
        m.patch_proj = LinearLayer<S>::init(m.params, "teacher.patch_proj", patch_dim, cfg.encoder_dim, rng);
        m.pos_table = sincos_pos_table<S>(m.grid_h, m.grid_w, cfg.encoder_dim);
        m.encoder = EncoderStack<S>::init(m.params, "teacher.encoder", m.enc_cfg, rng);
        m.params.set_trainable(false);
        return m;
    }
};

/// Per-window student predictions (or teacher targets): aligned window
/// tensors, mask flags, and the originating plan.
template <typename S>
struct WindowFeatures {
    std::vector<Tensor<S>> windows;
    std::vector<std::vector<std::uint8_t>> masked_flags;
    WindowPlan plan;
    std::vector<std::vector<GridCoord>> coords;  // per-window (row,col) record
};

namespace detail {

inline std::vector<GridCoord> window_coords(const WindowSpec& w, std::size_t gw) {
    std::vector<GridCoord> out;
    out.reserve(w.token_indices.size());
    for (std::size_t idx : w.token_indices) out.push_back({idx / gw, idx % gw});
    return out;
}

}  // namespace detail

/// Encode visible patches, assemble the full grid with mask tokens, extract
/// the plan's windows, and decode each window independently.
template <typename S>
WindowFeatures<S> student_forward(const StudentModel<S>& m, const Tensor<S>& image, const MaskPlan& mask_plan,
                                  const WindowPlan& window_plan) {
    TokenGrid<S> raw = patchify(image, m.enc_cfg.patch_size);
    if (raw.grid_h != m.grid_h || raw.grid_w != m.grid_w)
        throw std::invalid_argument("student_forward: image grid does not match model");
    TokenGrid<S> embedded = embed(raw, m.patch_proj, m.pos_table);
    Tensor<S> encoded = encode_visible(embedded, mask_plan, m.encoder);
    Tensor<S> full = assemble_full_grid(encoded, mask_plan, m.mask_token, m.pos_table);
    LocalFieldBatch<S> fields = extract(full, window_plan, mask_plan);

    WindowFeatures<S> out;
    out.plan = window_plan;
    out.masked_flags = std::move(fields.masked_flags);
    out.windows.reserve(fields.windows.size());
    for (std::size_t w = 0; w < fields.windows.size(); ++w) {
        Tensor<S> z = m.dec_in.forward(fields.windows[w]);
        z = m.decoder.forward(z);
        out.windows.push_back(m.dec_out.forward(z));
        out.coords.push_back(detail::window_coords(window_plan.specs[w], m.grid_w));
    }
    return out;
}

/// Embed all patches (no masking), extract the same windows, and run the
/// teacher encoder over each window independently (window-local attention).
/// No gradients are ever recorded.
template <typename S>
WindowFeatures<S> teacher_forward(const TeacherModel<S>& m, const Tensor<S>& image, const WindowPlan& window_plan) {
    NoGradGuard ng;
    TokenGrid<S> raw = patchify(image, m.enc_cfg.patch_size);
    if (raw.grid_h != m.grid_h || raw.grid_w != m.grid_w)
        throw std::invalid_argument("teacher_forward: image grid does not match model");
    for (const auto& w : window_plan.specs)
        if (w.top_left.row + w.size > m.grid_h || w.top_left.col + w.size > m.grid_w)
            throw std::invalid_argument("teacher_forward: window plan does not fit the teacher grid");
    TokenGrid<S> embedded = embed(raw, m.patch_proj, m.pos_table);

    WindowFeatures<S> out;
    out.plan = window_plan;
    out.windows.reserve(window_plan.specs.size());
    for (const auto& w : window_plan.specs) {
        Tensor<S> tokens = gather_rows(embedded.tokens, w.token_indices);
        out.windows.push_back(m.encoder.forward(tokens));
        out.coords.push_back(detail::window_coords(w, m.grid_w));
        out.masked_flags.emplace_back(w.token_indices.size(), 0);
    }
    return out;
}

/// Smooth-L1 between student and teacher features, summed over masked token
/// positions (and all channels) in every window, divided by the number of
/// masked-token occurrences R (overlaps counted with multiplicity). Visible
/// positions contribute exactly zero.
template <typename S>
Tensor<S> reconstruction_loss(const WindowFeatures<S>& student, const WindowFeatures<S>& teacher, S beta,
                              std::ostream* warn_stream = &std::cerr) {
    if (student.windows.size() != teacher.windows.size())
        throw std::invalid_argument("reconstruction_loss: window count mismatch (" +
                                    std::to_string(student.windows.size()) + " vs " +
                                    std::to_string(teacher.windows.size()) + ")");
    std::size_t r_total = 0;
    for (const auto& f : student.masked_flags)
        for (auto v : f) r_total += v;
    if (r_total == 0) {
        if (warn_stream) (*warn_stream) << "[lvr] warning: no masked token falls in any window; loss defined as 0\n";
        return Tensor<S>::scalar(S(0));
    }
    Tensor<S> total;
    for (std::size_t w = 0; w < student.windows.size(); ++w) {
        if (student.windows[w].shape() != teacher.windows[w].shape())
            shape_error("reconstruction_loss", student.windows[w].shape(), teacher.windows[w].shape());
        const auto& flags = student.masked_flags[w];
        std::vector<S> maskcol(flags.size());
        for (std::size_t i = 0; i < flags.size(); ++i) maskcol[i] = flags[i] ? S(1) : S(0);
        Tensor<S> mask = Tensor<S>::from_data({flags.size(), 1}, std::move(maskcol));
        Tensor<S> err = smooth_l1(sub(student.windows[w], teacher.windows[w]), beta);
        Tensor<S> contrib = sum(mul(err, mask));
        total = total.defined() ? add(total, contrib) : contrib;
    }
    return scale(total, S(1) / static_cast<S>(r_total));
}

/// Copies the student's patch projection, positional table, and every
/// encoder-block parameter into the teacher, bitwise. The student's decoder
/// and mask token have no teacher counterpart and are not copied. The
/// teacher stays frozen afterwards.
template <typename S>
void breakpoint_copy(const StudentModel<S>& student, TeacherModel<S>& teacher) {
    std::string problems;
    std::size_t copied = 0;
    for (auto& [tname, tparam] : teacher.params) {
        std::string sname = "student." + tname.substr(std::string("teacher.").size());
        const Tensor<S>* sparam = student.params.find(sname);
        if (!sparam) {
            problems += "  no student counterpart for " + tname + "\n";
            continue;
        }
        if (sparam->shape() != tparam.shape()) {
            problems += "  shape mismatch " + tname + ": " + shape_str(tparam.shape()) + " vs " +
                        shape_str(sparam->shape()) + "\n";
            continue;
        }
        tparam.values() = sparam->values();
        ++copied;
    }
    if (!problems.empty()) throw std::invalid_argument("breakpoint_copy: architecture mismatch:\n" + problems);
    if (copied == 0) throw std::invalid_argument("breakpoint_copy: nothing to copy");
    if (student.pos_table.shape() != teacher.pos_table.shape())
        throw std::invalid_argument("breakpoint_copy: positional table mismatch");
    teacher.pos_table.values() = student.pos_table.values();
    teacher.params.set_trainable(false);
}

// ---------------------------------------------------------------------------
// Training loop

struct PretrainResult {
    double first_epoch_mean_loss = 0;
    double final_epoch_mean_loss = 0;
    std::size_t total_steps = 0;
    std::string breakpoint_checkpoint;
    std::string final_checkpoint;
};

namespace detail {

template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& f) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::size_t workers = std::min(threads, n);
    pool.reserve(workers);
    for (std::size_t t = 0; t < workers; ++t)
        pool.emplace_back([&] {
            for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) f(i);
        });
    for (auto& th : pool) th.join();
}

}  // namespace detail

/// Observer hook for tests and debug tooling; called after every optimizer
/// step with the models in their post-step state.
template <typename S>
using PretrainObserver =
    std::function<void(std::size_t epoch, std::size_t step, const StudentModel<S>&, const TeacherModel<S>&)>;

/// Two-stage teacher-guided masked reconstruction. Per step: fresh mask and
/// window plans per image, teacher targets (no tape), student forward,
/// masked smooth-L1, backward, AdamW with warmup+cosine schedule. The
/// teacher is refreshed from the student exactly once, at the breakpoint
/// epoch boundary.
template <typename S>
PretrainResult pretrain_loop(const RunConfig& cfg, const DatasetManifest& data, const std::string& run_dir,
                             MetricsWriter& metrics, PretrainObserver<S> observer = nullptr) {
    cfg.validate();
    auto train = data.split("train");
    if (train.empty()) throw DataError("pretrain: empty train split");

    StudentModel<S> student = StudentModel<S>::build(cfg, seed_mix(cfg.seed, "init.student"));
    TeacherModel<S> teacher = TeacherModel<S>::build(cfg, seed_mix(cfg.seed, "init.teacher"));
    AdamWState<S> opt;
    opt.init(student.params);

    // Materialize the unlabeled corpus once; samples are pure functions of
    // their manifest entries.
    std::vector<Tensor<S>> images(train.size());
    detail::parallel_for(train.size(), cfg.threads,
                         [&](std::size_t i) { images[i] = data.materialize<S>(train[i]).image; });

    const std::size_t tokens = cfg.grid_h() * cfg.grid_w();
    const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * cfg.total_epochs;
    const std::size_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;

    PretrainResult result;
    result.total_steps = total_steps;
    std::size_t global_step = 0;
    double epoch_loss_sum = 0;
    std::size_t epoch_loss_count = 0;

    namespace fs = std::filesystem;

    for (std::size_t epoch = 0; epoch < cfg.total_epochs; ++epoch) {
        if (epoch == cfg.breakpoint_epoch) {
            breakpoint_copy(student, teacher);
            metrics.event("breakpoint_copy", {{"epoch", epoch}, {"step", global_step}});
            result.breakpoint_checkpoint = (fs::path(run_dir) / "breakpoint.ckpt").string();
            save_checkpoint(result.breakpoint_checkpoint, cfg.echo(), student.params, &opt,
                            epoch, global_step, cfg.seed);
        }
        const char* phase = epoch < cfg.breakpoint_epoch ? "stage1" : "stage2";

        std::vector<std::size_t> order(train.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng order_rng(seed_mix(cfg.seed, "order", epoch));
        order_rng.shuffle(order);

        epoch_loss_sum = 0;
        epoch_loss_count = 0;

        for (std::size_t s = 0; s < steps_per_epoch; ++s, ++global_step) {
            auto t0 = std::chrono::steady_clock::now();
            std::size_t begin = s * cfg.batch_size;
            std::size_t end = std::min(begin + cfg.batch_size, train.size());
            std::size_t bsz = end - begin;

            std::vector<MaskPlan> mask_plans(bsz);
            std::vector<WindowPlan> window_plans(bsz);
            for (std::size_t b = 0; b < bsz; ++b) {
                std::size_t img = order[begin + b];
                mask_plans[b] = sample_mask(tokens, cfg.mask_ratio, seed_mix(cfg.seed, "mask", epoch, global_step, img));
                window_plans[b] = sample_window_plan(cfg.grid_h(), cfg.grid_w(), cfg.window_counts,
                                                     seed_mix(cfg.seed, "window", epoch, global_step, img));
            }

            // Teacher targets are read-only and independent per image.
            std::vector<WindowFeatures<S>> targets(bsz);
            detail::parallel_for(bsz, cfg.threads, [&](std::size_t b) {
                targets[b] = teacher_forward(teacher, images[order[begin + b]], window_plans[b]);
            });

            Tensor<S> batch_loss;
            for (std::size_t b = 0; b < bsz; ++b) {
                WindowFeatures<S> preds =
                    student_forward(student, images[order[begin + b]], mask_plans[b], window_plans[b]);
                if (cfg.debug_checks && preds.coords != targets[b].coords)
                    throw NumericalError("position agreement violated at step " + std::to_string(global_step));
                Tensor<S> li = reconstruction_loss(preds, targets[b], static_cast<S>(cfg.recon_beta));
                batch_loss = batch_loss.defined() ? add(batch_loss, li) : li;
            }
            batch_loss = scale(batch_loss, S(1) / static_cast<S>(bsz));

            double loss_value = static_cast<double>(batch_loss.item());
            if (!std::isfinite(loss_value)) {
                std::string seeds;
                for (std::size_t b = 0; b < bsz; ++b)
                    seeds += " img=" + std::to_string(order[begin + b]) +
                             " mask_seed=" + std::to_string(mask_plans[b].seed) +
                             " window_seed=" + std::to_string(window_plans[b].seed);
                throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                                     std::to_string(global_step) + "; offending batch:" + seeds);
            }

            backward(batch_loss);
            double lr = cosine_warmup_lr(cfg.lr, global_step, warmup_steps, total_steps);
            adamw_step(student.params, opt, static_cast<S>(lr), static_cast<S>(cfg.beta1), static_cast<S>(cfg.beta2),
                       static_cast<S>(1e-8), static_cast<S>(cfg.weight_decay));
            student.params.zero_grad();

            double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            metrics.step_row(global_step + 1, epoch, loss_value, lr, seconds, phase);
            epoch_loss_sum += loss_value;
            ++epoch_loss_count;
            if (observer) observer(epoch, global_step, student, teacher);
        }

        double epoch_mean = epoch_loss_sum / static_cast<double>(epoch_loss_count);
        if (epoch == 0) result.first_epoch_mean_loss = epoch_mean;
        result.final_epoch_mean_loss = epoch_mean;
    }

    result.final_checkpoint = (fs::path(run_dir) / "final.ckpt").string();
    save_checkpoint(result.final_checkpoint, cfg.echo(), student.params, &opt, cfg.total_epochs,
                    global_step, cfg.seed);
    return result;
}

}  // namespace lvr
