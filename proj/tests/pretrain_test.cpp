#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gradcheck.hpp"
#include "lvr/pretrain.hpp"

using lvr::MaskPlan;
using lvr::RunConfig;
using lvr::WindowPlan;
using Td = lvr::Tensor<double>;
using Tf = lvr::Tensor<float>;

namespace fs = std::filesystem;

namespace {

RunConfig paper_grid_config() {
    RunConfig cfg;
    cfg.image_size = 112;  // 14x14 grid at patch 8
    cfg.patch_size = 8;
    cfg.encoder_depth = 1;
    cfg.encoder_dim = 16;
    cfg.encoder_heads = 2;
    cfg.decoder_depth = 1;
    cfg.decoder_dim = 16;
    cfg.decoder_heads = 2;
    cfg.mlp_ratio = 2;
    cfg.window_counts = {{5, 4}, {7, 2}, {9, 1}};
    return cfg;
}

RunConfig micro_config() {
    RunConfig cfg;
    cfg.image_size = 16;  // 4x4 grid at patch 4
    cfg.patch_size = 4;
    cfg.encoder_depth = 1;
    cfg.encoder_dim = 8;
    cfg.encoder_heads = 2;
    cfg.decoder_depth = 1;
    cfg.decoder_dim = 8;
    cfg.decoder_heads = 2;
    cfg.mlp_ratio = 2;
    cfg.window_counts = {{2, 1}};
    cfg.mask_ratio = 0.5;
    cfg.total_epochs = 4;
    cfg.breakpoint_epoch = 2;
    cfg.warmup_epochs = 1;
    cfg.batch_size = 4;
    cfg.n_train = 8;
    cfg.n_val = 0;
    cfg.n_test = 0;
    return cfg;
}

template <typename S>
lvr::Tensor<S> test_image(const RunConfig& cfg, std::uint64_t seed) {
    lvr::Rng rng(seed);
    std::vector<S> d(cfg.channels * cfg.image_size * cfg.image_size);
    for (auto& v : d) v = static_cast<S>(rng.next_double());
    return lvr::Tensor<S>::from_data({cfg.channels, cfg.image_size, cfg.image_size}, std::move(d));
}

std::vector<nlohmann::json> read_metrics(const fs::path& p) {
    std::ifstream in(p);
    std::vector<nlohmann::json> rows;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) rows.push_back(nlohmann::json::parse(line));
    return rows;
}

struct TempDir {
    fs::path path;
    TempDir(const char* tag) : path(fs::temp_directory_path() / (std::string("lvr_") + tag)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(StudentForward, DefaultPlanShapes) {
    RunConfig cfg = paper_grid_config();
    auto student = lvr::StudentModel<double>::build(cfg, 1);
    auto img = test_image<double>(cfg, 2);
    auto mask = lvr::sample_mask(196, 0.6, 3);
    auto plan = lvr::sample_window_plan(14, 14, cfg.window_counts, 4);
    auto out = lvr::student_forward(student, img, mask, plan);
    ASSERT_EQ(out.windows.size(), 7u);
    std::vector<std::size_t> sizes;
    for (const auto& w : out.windows) {
        EXPECT_EQ(w.dim(1), cfg.encoder_dim);
        sizes.push_back(w.dim(0));
    }
    EXPECT_EQ(sizes, (std::vector<std::size_t>{25, 25, 25, 25, 49, 49, 81}));
}

TEST(StudentForward, ZeroRatioIdentityDecoderIsProjectedEncoderFeatures) {
    RunConfig cfg = micro_config();
    cfg.decoder_depth = 0;
    auto student = lvr::StudentModel<double>::build(cfg, 5);
    auto img = test_image<double>(cfg, 6);
    auto mask = lvr::sample_mask(16, 0.0, 7);
    WindowPlan plan = lvr::sample_window_plan(4, 4, {{2, 1}}, 8);
    auto out = lvr::student_forward(student, img, mask, plan);

    auto raw = lvr::patchify(img, cfg.patch_size);
    auto embedded = lvr::embed(raw, student.patch_proj, student.pos_table);
    Td enc = student.encoder.forward(embedded.tokens);
    Td slots = lvr::gather_rows(enc, plan.specs[0].token_indices);
    Td expect = student.dec_out.forward(student.dec_in.forward(slots));
    ASSERT_EQ(out.windows[0].shape(), expect.shape());
    for (std::size_t i = 0; i < expect.numel(); ++i)
        EXPECT_DOUBLE_EQ(out.windows[0].values()[i], expect.values()[i]);
}

TEST(StudentForward, PixelsOutsideWindowsAreInertWithIdentityEncoder) {
    RunConfig cfg = micro_config();
    cfg.encoder_depth = 0;
    auto student = lvr::StudentModel<double>::build(cfg, 9);
    auto img = test_image<double>(cfg, 10);
    auto mask = lvr::sample_mask(16, 0.0, 11);
    WindowPlan plan;
    plan.specs.push_back(lvr::make_window(2, 0, 0, 4, 4));  // covers tokens 0,1,4,5
    auto before = lvr::student_forward(student, img, mask, plan);
    // token 15 is patch (3,3): pixels [12..15]x[12..15]
    for (std::size_t y = 12; y < 16; ++y)
        for (std::size_t x = 12; x < 16; ++x) img.at_mut({0, y, x}) += 50.0;
    auto after = lvr::student_forward(student, img, mask, plan);
    for (std::size_t i = 0; i < before.windows[0].numel(); ++i)
        EXPECT_DOUBLE_EQ(after.windows[0].values()[i], before.windows[0].values()[i]);
}

TEST(TeacherForward, DeterministicAndReproducible) {
    RunConfig cfg = micro_config();
    auto teacher = lvr::TeacherModel<double>::build(cfg, 21);
    auto teacher2 = lvr::TeacherModel<double>::build(cfg, 21);
    auto img = test_image<double>(cfg, 22);
    auto plan = lvr::sample_window_plan(4, 4, {{2, 2}}, 23);
    auto a = lvr::teacher_forward(teacher, img, plan);
    auto b = lvr::teacher_forward(teacher, img, plan);
    auto c = lvr::teacher_forward(teacher2, img, plan);
    for (std::size_t w = 0; w < a.windows.size(); ++w) {
        EXPECT_EQ(a.windows[w].values(), b.windows[w].values());
        EXPECT_EQ(a.windows[w].values(), c.windows[w].values());
        EXPECT_FALSE(a.windows[w].requires_grad());
    }
}

TEST(TeacherForward, DisjointWindowLocality) {
    RunConfig cfg = micro_config();
    auto teacher = lvr::TeacherModel<double>::build(cfg, 31);
    auto img = test_image<double>(cfg, 32);
    WindowPlan plan;
    plan.specs.push_back(lvr::make_window(2, 0, 0, 4, 4));
    plan.specs.push_back(lvr::make_window(2, 2, 2, 4, 4));
    auto before = lvr::teacher_forward(teacher, img, plan);
    // edit pixels inside window 0 only (patch (0,0) = pixels [0..4)^2)
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) img.at_mut({0, y, x}) += 3.0;
    auto after = lvr::teacher_forward(teacher, img, plan);
    bool changed0 = false;
    for (std::size_t i = 0; i < before.windows[0].numel(); ++i)
        changed0 |= after.windows[0].values()[i] != before.windows[0].values()[i];
    EXPECT_TRUE(changed0);
    for (std::size_t i = 0; i < before.windows[1].numel(); ++i)
        EXPECT_DOUBLE_EQ(after.windows[1].values()[i], before.windows[1].values()[i]);
}

TEST(TeacherForward, PlanMismatchRejected) {
    RunConfig cfg = micro_config();
    auto teacher = lvr::TeacherModel<double>::build(cfg, 41);
    auto img = test_image<double>(cfg, 42);
    WindowPlan plan;
    plan.specs.push_back(lvr::make_window(3, 3, 3, 6, 6));  // fits a 6x6 grid, not 4x4
    EXPECT_THROW(lvr::teacher_forward(teacher, img, plan), std::invalid_argument);
}

TEST(ReconstructionLoss, ZeroWhenEqual) {
    lvr::WindowFeatures<double> s, t;
    s.windows.push_back(Td::from_data({2, 3}, {1, 2, 3, 4, 5, 6}));
    t.windows.push_back(Td::from_data({2, 3}, {1, 2, 3, 4, 5, 6}));
    s.masked_flags.push_back({1, 1});
    t.masked_flags.push_back({1, 1});
    EXPECT_DOUBLE_EQ(lvr::reconstruction_loss(s, t, 1.0).item(), 0.0);
}

TEST(ReconstructionLoss, SmoothL1ClosedForms) {
    lvr::WindowFeatures<double> s, t;
    s.windows.push_back(Td::from_data({1, 1}, {1.0}));
    t.windows.push_back(Td::from_data({1, 1}, {0.5}));
    s.masked_flags.push_back({1});
    t.masked_flags.push_back({1});
    EXPECT_DOUBLE_EQ(lvr::reconstruction_loss(s, t, 1.0).item(), 0.125);  // quadratic branch

    lvr::WindowFeatures<double> s2, t2;
    s2.windows.push_back(Td::from_data({1, 1}, {2.5}));
    t2.windows.push_back(Td::from_data({1, 1}, {0.5}));
    s2.masked_flags.push_back({1});
    t2.masked_flags.push_back({1});
    EXPECT_DOUBLE_EQ(lvr::reconstruction_loss(s2, t2, 1.0).item(), 1.5);  // linear branch
}

TEST(ReconstructionLoss, NormalizesByMaskedOccurrences) {
    // two windows, three masked occurrences, each with |d| = 2 -> mean 1.5
    lvr::WindowFeatures<double> s, t;
    s.windows.push_back(Td::from_data({2, 1}, {2.0, 2.0}));
    t.windows.push_back(Td::zeros({2, 1}));
    s.masked_flags.push_back({1, 1});
    s.windows.push_back(Td::from_data({2, 1}, {2.0, 7.0}));
    t.windows.push_back(Td::zeros({2, 1}));
    s.masked_flags.push_back({1, 0});  // second token visible: excluded
    EXPECT_DOUBLE_EQ(lvr::reconstruction_loss(s, t, 1.0).item(), 1.5);
}

TEST(ReconstructionLoss, VisiblePositionsAreExactlyExcluded) {
    RunConfig cfg = micro_config();
    auto student = lvr::StudentModel<double>::build(cfg, 51);
    auto teacher = lvr::TeacherModel<double>::build(cfg, 52);
    auto img = test_image<double>(cfg, 53);
    auto mask = lvr::sample_mask(16, 0.5, 54);
    auto plan = lvr::sample_window_plan(4, 4, {{2, 2}, {3, 1}}, 55);
    auto preds = lvr::student_forward(student, img, mask, plan);
    auto targets = lvr::teacher_forward(teacher, img, plan);
    double base = lvr::reconstruction_loss(preds, targets, 1.0).item();

    // randomize teacher targets at every visible position
    lvr::Rng rng(56);
    for (std::size_t w = 0; w < targets.windows.size(); ++w)
        for (std::size_t i = 0; i < preds.masked_flags[w].size(); ++i)
            if (!preds.masked_flags[w][i])
                for (std::size_t d = 0; d < cfg.encoder_dim; ++d)
                    targets.windows[w].at_mut({i, d}) = rng.next_range(-1e3, 1e3);
    double after = lvr::reconstruction_loss(preds, targets, 1.0).item();
    EXPECT_EQ(base, after);  // bit-identical
}

TEST(ReconstructionLoss, EmptyMaskIsZeroWithWarning) {
    lvr::WindowFeatures<double> s, t;
    s.windows.push_back(Td::from_data({1, 1}, {3.0}));
    t.windows.push_back(Td::from_data({1, 1}, {1.0}));
    s.masked_flags.push_back({0});
    std::ostringstream warn;
    EXPECT_DOUBLE_EQ(lvr::reconstruction_loss(s, t, 1.0, &warn).item(), 0.0);
    EXPECT_NE(warn.str().find("warning"), std::string::npos);
}

TEST(ReconstructionLoss, StructureMismatchRejected) {
    lvr::WindowFeatures<double> s, t;
    s.windows.push_back(Td::zeros({2, 2}));
    s.masked_flags.push_back({1, 1});
    EXPECT_THROW(lvr::reconstruction_loss(s, t, 1.0), std::invalid_argument);
    t.windows.push_back(Td::zeros({3, 2}));
    EXPECT_THROW(lvr::reconstruction_loss(s, t, 1.0), std::invalid_argument);
}

TEST(BreakpointCopy, EncoderBecomesBitIdentical) {
    RunConfig cfg = micro_config();
    auto student = lvr::StudentModel<double>::build(cfg, 61);
    auto teacher = lvr::TeacherModel<double>::build(cfg, 62);
    // pre-copy: different random inits
    bool any_diff = false;
    for (auto& [tname, tp] : teacher.params) {
        auto sname = "student." + tname.substr(8);
        any_diff |= student.params.find(sname)->values() != tp.values();
    }
    EXPECT_TRUE(any_diff);

    lvr::breakpoint_copy(student, teacher);
    for (auto& [tname, tp] : teacher.params) {
        auto sname = "student." + tname.substr(8);
        EXPECT_EQ(student.params.find(sname)->values(), tp.values()) << tname;
        EXPECT_FALSE(tp.requires_grad());
    }
    // decoder and mask token have no teacher counterpart
    EXPECT_EQ(teacher.params.find("teacher.mask_token"), nullptr);
    EXPECT_EQ(teacher.params.find("teacher.dec_in.w"), nullptr);
}

TEST(BreakpointCopy, ArchitectureMismatchRejected) {
    RunConfig cfg = micro_config();
    auto student = lvr::StudentModel<double>::build(cfg, 63);
    RunConfig other = cfg;
    other.encoder_dim = 16;
    other.encoder_heads = 2;
    auto teacher = lvr::TeacherModel<double>::build(other, 64);
    EXPECT_THROW(lvr::breakpoint_copy(student, teacher), std::invalid_argument);
}

TEST(PretrainLoop, MicroRunContractChecks) {
    RunConfig cfg = micro_config();
    cfg.seed = 777;
    cfg.debug_checks = true;
    auto manifest = lvr::make_split(lvr::default_scene(cfg.image_size), cfg.n_train, 0, 0, 100);

    TempDir dir("pretrain_micro");
    lvr::MetricsWriter metrics((dir.path / "metrics.jsonl").string());

    // observer tracks teacher freeze and gradient isolation per step
    std::vector<std::vector<float>> teacher_snapshots;
    std::size_t grad_violations = 0;
    auto observer = [&](std::size_t, std::size_t, const lvr::StudentModel<float>& s,
                        const lvr::TeacherModel<float>& t) {
        std::vector<float> snap;
        for (const auto& [name, p] : t.params) {
            snap.insert(snap.end(), p.values().begin(), p.values().end());
            if (p.has_grad()) ++grad_violations;
        }
        (void)s;
        teacher_snapshots.push_back(std::move(snap));
    };
    auto result = lvr::pretrain_loop<float>(cfg, manifest, dir.path.string(), metrics, observer);

    EXPECT_EQ(result.total_steps, 8u);  // 8 images / batch 4 * 4 epochs
    EXPECT_EQ(grad_violations, 0u);

    // teacher changed exactly once, at the breakpoint step boundary
    std::size_t changes = 0;
    for (std::size_t i = 1; i < teacher_snapshots.size(); ++i)
        if (teacher_snapshots[i] != teacher_snapshots[i - 1]) ++changes;
    EXPECT_EQ(changes, 1u);
    EXPECT_NE(teacher_snapshots[3], teacher_snapshots[4]);  // epoch 2 starts at step 4

    // teacher-after-copy equals the student encoder stored in the
    // breakpoint checkpoint (saved immediately after the copy)
    auto ckpt = lvr::load_checkpoint(result.breakpoint_checkpoint);
    lvr::RunConfig echo_cfg = lvr::RunConfig::parse_text(ckpt.config_echo);
    EXPECT_EQ(echo_cfg.seed, cfg.seed);
    auto teacher_check = lvr::TeacherModel<float>::build(cfg, 12345);  // arbitrary init, will be overwritten
    std::vector<float> expected;
    for (auto& [tname, tp] : teacher_check.params) {
        auto sname = "student." + tname.substr(8);
        auto it = ckpt.params.find(sname);
        ASSERT_NE(it, ckpt.params.end()) << sname;
        expected.insert(expected.end(), it->second.second.begin(), it->second.second.end());
    }
    EXPECT_EQ(teacher_snapshots[4], expected);

    // restoring teacher-named params from a student checkpoint must fail
    EXPECT_THROW(lvr::restore_params(ckpt, teacher_check.params, "teacher."), lvr::DataError);
}

TEST(PretrainLoop, BreakpointEventAppearsExactlyOnce) {
    RunConfig cfg = micro_config();
    cfg.seed = 900;
    auto manifest = lvr::make_split(lvr::default_scene(cfg.image_size), cfg.n_train, 0, 0, 200);
    TempDir dir("pretrain_event");
    lvr::MetricsWriter metrics((dir.path / "metrics.jsonl").string());
    lvr::pretrain_loop<float>(cfg, manifest, dir.path.string(), metrics);
    auto rows = read_metrics(dir.path / "metrics.jsonl");
    std::size_t events = 0, steps = 0;
    for (const auto& r : rows) {
        if (r.contains("event") && r["event"] == "breakpoint_copy") ++events;
        if (r.contains("loss")) ++steps;
    }
    EXPECT_EQ(events, 1u);
    EXPECT_EQ(steps, 8u);
    // phases flip at the breakpoint
    EXPECT_EQ(rows[0]["phase"], "stage1");
    EXPECT_EQ(rows.back()["phase"], "stage2");
}

TEST(PretrainLoop, IdenticalSeedsGiveIdenticalLossStreams) {
    RunConfig cfg = micro_config();
    cfg.seed = 4242;
    auto manifest = lvr::make_split(lvr::default_scene(cfg.image_size), cfg.n_train, 0, 0, 300);
    TempDir dir_a("pretrain_det_a"), dir_b("pretrain_det_b");
    {
        lvr::MetricsWriter ma((dir_a.path / "metrics.jsonl").string());
        lvr::pretrain_loop<float>(cfg, manifest, dir_a.path.string(), ma);
    }
    {
        lvr::MetricsWriter mb((dir_b.path / "metrics.jsonl").string());
        lvr::pretrain_loop<float>(cfg, manifest, dir_b.path.string(), mb);
    }
    auto ra = read_metrics(dir_a.path / "metrics.jsonl");
    auto rb = read_metrics(dir_b.path / "metrics.jsonl");
    ASSERT_EQ(ra.size(), rb.size());
    for (std::size_t i = 0; i < ra.size(); ++i) {
        ra[i].erase("seconds");
        rb[i].erase("seconds");
        EXPECT_EQ(ra[i], rb[i]) << "row " << i;
    }
}

TEST(PretrainLoop, ThreadCountDoesNotChangeResults) {
    RunConfig cfg = micro_config();
    cfg.seed = 555;
    auto manifest = lvr::make_split(lvr::default_scene(cfg.image_size), cfg.n_train, 0, 0, 400);
    TempDir dir_a("pretrain_thr_a"), dir_b("pretrain_thr_b");
    cfg.threads = 1;
    lvr::MetricsWriter ma((dir_a.path / "metrics.jsonl").string());
    auto res1 = lvr::pretrain_loop<float>(cfg, manifest, dir_a.path.string(), ma);
    cfg.threads = 2;
    lvr::MetricsWriter mb((dir_b.path / "metrics.jsonl").string());
    auto res2 = lvr::pretrain_loop<float>(cfg, manifest, dir_b.path.string(), mb);
    EXPECT_EQ(res1.final_epoch_mean_loss, res2.final_epoch_mean_loss);
}

TEST(EndToEnd, MicroPretrainStepGradcheck) {
    // grid 4x4, dim 8, one 2x2 window, 64-bit, rel err <= 1e-3
    RunConfig cfg = micro_config();
    auto student = lvr::StudentModel<double>::build(cfg, 71);
    auto teacher = lvr::TeacherModel<double>::build(cfg, 72);
    auto img = test_image<double>(cfg, 73);
    auto mask = lvr::sample_mask(16, 0.5, 74);
    WindowPlan plan;
    plan.specs.push_back(lvr::make_window(2, 1, 1, 4, 4));
    auto targets = lvr::teacher_forward(teacher, img, plan);

    std::vector<lvr::Tensor<double>*> leaves;
    for (auto& [name, p] : student.params) leaves.push_back(&p);
    auto res = lvrtest::gradcheck(
        leaves,
        [&] {
            auto preds = lvr::student_forward(student, img, mask, plan);
            return lvr::reconstruction_loss(preds, targets, 1.0);
        },
        1e-5);
    EXPECT_LE(res.max_rel_err, 1e-3);
    EXPECT_GT(res.checked, 1000u);
}
