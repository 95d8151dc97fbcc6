#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "ctseg/config.hpp"
#include "ctseg/cvsplit.hpp"
#include "ctseg/errors.hpp"
#include "ctseg/inference.hpp"
#include "ctseg/manifest.hpp"
#include "ctseg/metrics.hpp"
#include "ctseg/preprocess.hpp"
#include "ctseg/stack_io.hpp"
#include "ctseg/trainer.hpp"

namespace ctseg {

// Fixed layout of a run directory. Everything a pipeline stage produces lives
// under run_dir so a run is self-contained and resumable.
struct RunLayout {
    std::filesystem::path root;

    explicit RunLayout(std::filesystem::path run_dir) : root(std::move(run_dir)) {}

    std::filesystem::path lock_file() const { return root / ".lock"; }
    std::filesystem::path resolved_config() const { return root / "resolved_config.json"; }
    std::filesystem::path markers_dir() const { return root / "markers"; }
    std::filesystem::path marker(const std::string& cmd) const {
        return markers_dir() / (cmd + ".json");
    }

    std::filesystem::path preprocessed_dir() const { return root / "preprocessed"; }
    std::filesystem::path canonical_manifest() const {
        return preprocessed_dir() / "manifest.csv";
    }
    std::filesystem::path sample_volume_dir(const std::string& id) const {
        return preprocessed_dir() / id / "volume";
    }
    std::filesystem::path sample_mask_dir(const std::string& id) const {
        return preprocessed_dir() / id / "mask";
    }
    std::filesystem::path sample_marker(const std::string& id) const {
        return preprocessed_dir() / (id + ".done.json");
    }
    std::filesystem::path preprocess_log() const { return root / "preprocess_log.csv"; }

    std::filesystem::path folds_file() const { return root / "folds.csv"; }

    std::filesystem::path checkpoint_dir(const std::string& loss) const {
        return root / "checkpoints" / loss;
    }
    std::filesystem::path checkpoint(const std::string& loss, int fold) const {
        return checkpoint_dir(loss) / ("fold_" + std::to_string(fold) + ".ckpt");
    }
    std::filesystem::path train_log(const std::string& loss) const {
        return root / "logs" / ("train_" + loss + ".csv");
    }

    std::filesystem::path prediction_dir(const std::string& loss,
                                         const std::string& id) const {
        return root / "predictions" / loss / id;
    }

    std::filesystem::path metrics_dir() const { return root / "metrics"; }
    std::filesystem::path metric_rows(const std::string& loss) const {
        return metrics_dir() / ("rows_" + loss + ".csv");
    }
    std::filesystem::path summary_file() const { return metrics_dir() / "summary.csv"; }

    std::filesystem::path report_dir() const { return root / "report"; }
};

// Exclusive advisory lock on a run directory: two commands writing the same
// run_dir concurrently would corrupt it.
class RunLock {
public:
    explicit RunLock(const RunLayout& layout) : path_(layout.lock_file()) {
        std::filesystem::create_directories(layout.root);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw Error("run directory is locked (" + path_.string() +
                        " exists); another command may be running — remove the "
                        "lock file if it is stale");
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] auto n = ::write(fd_, pid.data(), pid.size());
    }
    ~RunLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            std::error_code ec;
            std::filesystem::remove(path_, ec);
        }
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::filesystem::path path_;
    int fd_ = -1;
};

namespace detail {

inline std::string fnv_hex(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// Hash of the sections that determine preprocessing outputs; training knobs
// must not invalidate finished preprocessing.
inline std::string preprocess_hash(const RunConfig& cfg) {
    const nlohmann::json j = run_config_to_json(cfg);
    return fnv_hex(j["data"].dump() + j["preprocess"].dump());
}

inline std::string utc_now() {
    std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
    std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw UnwritablePathError(p.string());
    out << j.dump(2) << '\n';
}

inline void write_marker(const RunLayout& L, const std::string& cmd,
                         const RunConfig& cfg, nlohmann::json details) {
    write_json(L.marker(cmd), {{"command", cmd},
                               {"config_hash", config_hash(cfg)},
                               {"completed_utc", utc_now()},
                               {"details", std::move(details)}});
}

// Copies the fully-resolved config into the run directory (every command).
inline void stage_config(const RunLayout& L, const RunConfig& cfg) {
    write_json(L.resolved_config(), run_config_to_json(cfg));
}

inline void require_artifact(const std::filesystem::path& p, const std::string& hint) {
    if (!std::filesystem::exists(p))
        throw Error("missing " + hint + ": " + p.string());
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw Error("median of empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Sample standard deviation (ddof = 1); 0 for fewer than two values.
inline double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= double(v.size());
    double acc = 0.0;
    for (double x : v) acc += (x - mean) * (x - mean);
    return std::sqrt(acc / double(v.size() - 1));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// preprocess: raw stacks -> canonical normalized volume + mask per sample.
// Idempotent per sample via a marker carrying the preprocess-relevant config
// hash; --force reruns everything. Individual sample failures are collected
// and reported; exit code 1 signals a partial failure.
inline int cmd_preprocess(const RunConfig& cfg, bool force = false) {
    const RunLayout L(cfg.run_dir);
    RunLock lock(L);
    detail::stage_config(L, cfg);
    const auto records = load_manifest(cfg.manifest, cfg.data_root);
    const std::string phash = detail::preprocess_hash(cfg);

    std::filesystem::create_directories(L.preprocessed_dir());
    std::ofstream log(L.preprocess_log());
    if (!log) throw UnwritablePathError(L.preprocess_log().string());
    log << "sample_id,status,center_x,center_y,message\n";

    std::vector<SampleRecord> canonical;
    int failures = 0, skipped = 0, processed = 0;
    for (const auto& r : records) {
        SampleRecord out = r;
        out.volume_path = L.sample_volume_dir(r.sample_id);
        out.mask_path = L.sample_mask_dir(r.sample_id);
        const auto marker = L.sample_marker(r.sample_id);

        if (!force && std::filesystem::exists(marker)) {
            std::ifstream mi(marker);
            nlohmann::json m;
            if (mi && (mi >> m, m.value("hash", "") == phash) &&
                std::filesystem::exists(out.volume_path) &&
                std::filesystem::exists(out.mask_path)) {
                canonical.push_back(out);
                ++skipped;
                log << r.sample_id << ",skipped,,,up-to-date\n";
                continue;
            }
        }
        try {
            VolumeStack vol = load_stack(r.volume_path, cfg.voxel_um);
            MaskVolume mask = load_mask_stack(r.mask_path);
            require_same_shape(vol.shape(), mask.shape(), "raw volume/mask");
            if (cfg.z_flip.count(r.sample_id)) {
                vol = flip_z(vol);
                mask = flip_z(mask);
            }
            vol = trim_bottom(vol, cfg.trim_fraction);
            mask = trim_bottom(mask, cfg.trim_fraction);
            vol = normalize_global(vol);
            const auto center = locate_center(vol, cfg.center_threshold);
            auto [cvol, cmask, crop] = crop_canonical(vol, mask, center, cfg.crop_shape);
            save_stack(cvol, out.volume_path);
            save_stack(cmask, out.mask_path);
            detail::write_json(marker, {{"hash", phash},
                                        {"center", {center.first, center.second}},
                                        {"completed_utc", detail::utc_now()}});
            canonical.push_back(out);
            ++processed;
            log << r.sample_id << ",ok," << center.first << ',' << center.second
                << ",\n";
        } catch (const std::exception& e) {
            ++failures;
            std::string msg = e.what();
            std::replace(msg.begin(), msg.end(), ',', ';');
            std::replace(msg.begin(), msg.end(), '\n', ' ');
            log << r.sample_id << ",failed,,," << msg << '\n';
            std::cerr << "preprocess: sample " << r.sample_id << " failed: "
                      << e.what() << '\n';
        }
    }
    save_manifest(canonical, L.canonical_manifest());
    detail::write_marker(L, "preprocess", cfg,
                         {{"processed", processed},
                          {"skipped", skipped},
                          {"failed", failures},
                          {"samples", canonical.size()}});
    std::cout << "preprocess: " << processed << " processed, " << skipped
              << " up-to-date, " << failures << " failed\n";
    return failures ? 1 : 0;
}

// ---------------------------------------------------------------------------
// split: group-stratified k-fold assignment over the preprocessed manifest
// (falls back to the raw manifest if preprocessing has not run yet).
inline int cmd_split(const RunConfig& cfg) {
    const RunLayout L(cfg.run_dir);
    RunLock lock(L);
    detail::stage_config(L, cfg);
    const auto manifest = std::filesystem::exists(L.canonical_manifest())
                              ? L.canonical_manifest()
                              : cfg.manifest;
    const auto records = load_manifest(manifest);
    const FoldAssignment fa =
        group_stratified_kfold(records, cfg.folds, unsigned(cfg.seed));
    save_fold_assignment(fa, L.folds_file());
    detail::write_marker(L, "split", cfg,
                         {{"k", cfg.folds}, {"subjects", fa.subject_fold.size()}});
    std::cout << "split: " << fa.subject_fold.size() << " subjects into " << cfg.folds
              << " folds -> " << L.folds_file().string() << '\n';
    return 0;
}

namespace detail {

inline TrainConfig effective_train_config(const RunConfig& cfg,
                                          std::optional<LossKind> loss_override) {
    TrainConfig t = cfg.train;
    if (loss_override) t.loss.kind = *loss_override;
    return t;
}

inline std::vector<SampleRecord> load_canonical_manifest(const RunLayout& L) {
    require_artifact(L.canonical_manifest(),
                     "preprocessed manifest (run `preprocess` first)");
    return load_manifest(L.canonical_manifest());
}

inline FoldAssignment load_folds(const RunLayout& L, const RunConfig& cfg) {
    require_artifact(L.folds_file(), "fold assignment (run `split` first)");
    return load_fold_assignment(L.folds_file(), cfg.folds);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// train: per-fold training with best-validation checkpointing. --folds limits
// to a subset; --loss switches the trained loss (checkpoints are kept per
// loss, so the cross-loss comparison reuses one split).
inline int cmd_train(const RunConfig& cfg, const std::vector<int>& folds_subset = {},
                     std::optional<LossKind> loss_override = std::nullopt) {
    const RunLayout L(cfg.run_dir);
    RunLock lock(L);
    detail::stage_config(L, cfg);
    const TrainConfig tcfg = detail::effective_train_config(cfg, loss_override);
    const std::string loss = loss_name(tcfg.loss.kind);
    const auto records = detail::load_canonical_manifest(L);
    const FoldAssignment fa = detail::load_folds(L, cfg);
    for (int f : folds_subset)
        if (f < 0 || f >= cfg.folds)
            throw ConfigError("--folds index " + std::to_string(f) +
                              " outside [0," + std::to_string(cfg.folds - 1) + "]");

    std::filesystem::create_directories(L.train_log(loss).parent_path());
    const auto ckpts = train_all_folds(
        records, fa, tcfg,
        [&](const SampleRecord& r) { return load_canonical_sample(r, cfg.voxel_um); },
        L.checkpoint_dir(loss), L.train_log(loss), folds_subset,
        [&](int fold, const EpochStats& st) {
            std::cout << "train[" << loss << "] fold " << fold << " epoch "
                      << st.epoch << ": train " << st.train_loss << ", val "
                      << st.val_loss << " (" << st.seconds << "s)\n";
        });
    detail::write_marker(L, "train_" + loss, cfg,
                         {{"checkpoints", ckpts.size()}, {"loss", loss}});
    return 0;
}

// ---------------------------------------------------------------------------
// predict: out-of-fold dual-plane prediction of every sample, thresholded at
// the loss kind's operating point, written as mask stacks.
inline int cmd_predict(const RunConfig& cfg,
                       std::optional<LossKind> loss_override = std::nullopt) {
    const RunLayout L(cfg.run_dir);
    RunLock lock(L);
    detail::stage_config(L, cfg);
    const TrainConfig tcfg = detail::effective_train_config(cfg, loss_override);
    const LossKind kind = tcfg.loss.kind;
    const std::string loss = loss_name(kind);
    const auto records = detail::load_canonical_manifest(L);
    const FoldAssignment fa = detail::load_folds(L, cfg);

    std::map<int, std::filesystem::path> ckpts;
    std::vector<std::string> missing;
    for (int f = 0; f < cfg.folds; ++f) {
        const auto p = L.checkpoint(loss, f);
        if (std::filesystem::exists(p)) ckpts[f] = p;
        else missing.push_back(p.string());
    }
    if (!missing.empty()) {
        std::string what = "missing checkpoints (run `train` first):";
        for (const auto& m : missing) what += "\n  " + m;
        throw Error(what);
    }

    const double threshold = cfg.threshold_for(kind);
    int count = 0;
    out_of_fold_predict(
        records, fa, ckpts, threshold,
        [&](const SampleRecord& r) {
            return load_normalized_stack(r.volume_path, cfg.voxel_um);
        },
        [&](const SampleRecord& r, int fold, MaskVolume mask) {
            save_stack(mask, L.prediction_dir(loss, r.sample_id));
            ++count;
            std::cout << "predict[" << loss << "] " << r.sample_id << " (fold "
                      << fold << ", threshold " << threshold << ")\n";
        },
        cfg.predict_batch);
    detail::write_marker(L, "predict_" + loss, cfg,
                         {{"samples", count}, {"threshold", threshold}});
    return 0;
}

namespace detail {

struct SummaryKey {
    std::string loss;
    double pad_um;
    bool operator<(const SummaryKey& o) const {
        return loss != o.loss ? loss < o.loss : pad_um < o.pad_um;
    }
};

// metric rows csv <-> disk
inline void write_metric_rows(const std::filesystem::path& p,
                              const std::vector<MetricRow>& rows) {
    std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw UnwritablePathError(p.string());
    out << "sample_id,subject_id,loss,pad_um,pad_voxels,tp,fp,fn,tn,iou,dice,vs\n";
    out.precision(10);
    for (const auto& r : rows)
        out << r.sample_id << ',' << r.subject_id << ',' << r.loss_kind << ','
            << r.pad_um << ',' << r.pad_voxels << ',' << r.counts.tp << ','
            << r.counts.fp << ',' << r.counts.fn << ',' << r.counts.tn << ','
            << r.iou << ',' << r.dice << ',' << r.vs << '\n';
}

inline std::vector<MetricRow> read_metric_rows(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw Error("cannot open metric rows: " + p.string());
    std::string line;
    std::getline(in, line);  // header
    std::vector<MetricRow> rows;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto f = ctseg::detail::split_csv_line(line);
        if (f.size() < 12) throw Error("bad metric row in " + p.string() + ": " + line);
        MetricRow r;
        r.sample_id = f[0];
        r.subject_id = f[1];
        r.loss_kind = f[2];
        r.pad_um = std::stod(f[3]);
        r.pad_voxels = std::stoi(f[4]);
        r.counts.tp = std::stoll(f[5]);
        r.counts.fp = std::stoll(f[6]);
        r.counts.fn = std::stoll(f[7]);
        r.counts.tn = std::stoll(f[8]);
        r.iou = std::stod(f[9]);
        r.dice = std::stod(f[10]);
        r.vs = std::stod(f[11]);
        rows.push_back(std::move(r));
    }
    return rows;
}

// Every rows_<loss>.csv currently in the metrics directory.
inline std::vector<MetricRow> read_all_metric_rows(const RunLayout& L) {
    std::vector<MetricRow> all;
    if (!std::filesystem::is_directory(L.metrics_dir())) return all;
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(L.metrics_dir())) {
        const std::string name = e.path().filename().string();
        if (name.rfind("rows_", 0) == 0 && e.path().extension() == ".csv")
            files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        auto rows = read_metric_rows(f);
        all.insert(all.end(), rows.begin(), rows.end());
    }
    return all;
}

struct SummaryCell {
    int n = 0;
    double median_iou = 0, std_iou = 0;
    double median_dice = 0, std_dice = 0;
    double median_vs = 0, std_vs = 0;
};

inline std::map<SummaryKey, SummaryCell> summarize(const std::vector<MetricRow>& rows) {
    std::map<SummaryKey, std::vector<const MetricRow*>> groups;
    for (const auto& r : rows) groups[{r.loss_kind, r.pad_um}].push_back(&r);
    std::map<SummaryKey, SummaryCell> out;
    for (const auto& [key, g] : groups) {
        std::vector<double> iou, dice, vs;
        for (const MetricRow* r : g) {
            iou.push_back(r->iou);
            dice.push_back(r->dice);
            vs.push_back(r->vs);
        }
        SummaryCell c;
        c.n = int(g.size());
        c.median_iou = median(iou);
        c.std_iou = sample_std(iou);
        c.median_dice = median(dice);
        c.std_dice = sample_std(dice);
        c.median_vs = median(vs);
        c.std_vs = sample_std(vs);
        out[key] = c;
    }
    return out;
}

inline void write_summary(const std::filesystem::path& p,
                          const std::map<SummaryKey, SummaryCell>& summary) {
    std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw UnwritablePathError(p.string());
    out << "loss,pad_um,n,median_iou,std_iou,median_dice,std_dice,median_vs,std_vs\n";
    out.precision(10);
    for (const auto& [key, c] : summary)
        out << key.loss << ',' << key.pad_um << ',' << c.n << ',' << c.median_iou
            << ',' << c.std_iou << ',' << c.median_dice << ',' << c.std_dice << ','
            << c.median_vs << ',' << c.std_vs << '\n';
}

// Pivot table mirroring the usual presentation: one row per loss kind, one
// column per pad, cells median±std of banded IoU.
inline void write_summary_table(const std::filesystem::path& p,
                                const std::map<SummaryKey, SummaryCell>& summary) {
    std::set<std::string> losses;
    std::set<double> pads;
    for (const auto& [key, _] : summary) {
        losses.insert(key.loss);
        pads.insert(key.pad_um);
    }
    std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw UnwritablePathError(p.string());
    out << "loss";
    for (double pad : pads) out << ",iou@" << pad << "um";
    out << '\n';
    char cell[64];
    for (const auto& loss : losses) {
        out << loss;
        for (double pad : pads) {
            auto it = summary.find({loss, pad});
            if (it == summary.end()) {
                out << ",";
            } else {
                std::snprintf(cell, sizeof(cell), ",%.3f±%.3f", it->second.median_iou,
                              it->second.std_iou);
                out << cell;
            }
        }
        out << '\n';
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// evaluate: banded confusion metrics of every out-of-fold prediction against
// its ground truth, at every configured pad level, plus the per-pad
// median ± std summary across samples.
inline int cmd_evaluate(const RunConfig& cfg,
                        std::optional<LossKind> loss_override = std::nullopt) {
    const RunLayout L(cfg.run_dir);
    RunLock lock(L);
    detail::stage_config(L, cfg);
    const LossKind kind = detail::effective_train_config(cfg, loss_override).loss.kind;
    const std::string loss = loss_name(kind);
    const auto records = detail::load_canonical_manifest(L);

    std::vector<MetricRow> rows;
    for (const auto& r : records) {
        const auto pred_dir = L.prediction_dir(loss, r.sample_id);
        detail::require_artifact(pred_dir, "prediction for sample " + r.sample_id +
                                               " (run `predict` first)");
        const MaskVolume pred = load_mask_stack(pred_dir);
        const MaskVolume gt = load_mask_stack(r.mask_path);
        auto sample_rows = evaluate_sample(pred, gt, cfg.pads_um, cfg.voxel_um);
        for (auto& row : sample_rows) {
            row.sample_id = r.sample_id;
            row.subject_id = r.subject_id;
            row.loss_kind = loss;
        }
        rows.insert(rows.end(), sample_rows.begin(), sample_rows.end());
        std::cout << "evaluate[" << loss << "] " << r.sample_id << ": iou@"
                  << cfg.pads_um.front() << "um = " << sample_rows.front().iou << '\n';
    }
    detail::write_metric_rows(L.metric_rows(loss), rows);

    // summary regenerates from every loss evaluated so far
    const auto summary = detail::summarize(detail::read_all_metric_rows(L));
    detail::write_summary(L.summary_file(), summary);
    detail::write_summary_table(L.metrics_dir() / "summary_table.csv", summary);
    detail::write_marker(L, "evaluate_" + loss, cfg,
                         {{"samples", records.size()}, {"rows", rows.size()}});
    return 0;
}

namespace detail {

// Minimal line-chart rendering; axes, ticks, one polyline + point markers per
// loss kind, small legend.
inline void draw_metric_plot(const std::filesystem::path& out_path,
                             const std::string& title,
                             const std::vector<double>& pads,
                             const std::map<std::string, std::vector<double>>& series) {
    const int W = 960, H = 640, ml = 80, mr = 30, mt = 50, mb = 70;
    cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));

    double ymin = 1.0, ymax = 0.0;
    for (const auto& [_, ys] : series)
        for (double y : ys) {
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    ymin = std::max(0.0, std::floor(ymin * 10.0) / 10.0 - 0.1);
    ymax = 1.0;
    const double xmin = pads.front(), xmax = pads.back();
    const auto X = [&](double p) {
        return ml + int((p - xmin) / std::max(xmax - xmin, 1e-9) * (W - ml - mr));
    };
    const auto Y = [&](double v) {
        return H - mb - int((v - ymin) / std::max(ymax - ymin, 1e-9) * (H - mt - mb));
    };

    const cv::Scalar axis(60, 60, 60), grid(220, 220, 220);
    for (int i = 0; i <= 10; ++i) {
        const double v = ymin + (ymax - ymin) * i / 10.0;
        cv::line(img, {ml, Y(v)}, {W - mr, Y(v)}, grid, 1);
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%.2f", v);
        cv::putText(img, buf, {8, Y(v) + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.45, axis, 1,
                    cv::LINE_AA);
    }
    for (double p : pads) {
        cv::line(img, {X(p), H - mb}, {X(p), H - mb + 5}, axis, 1);
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%g", p);
        cv::putText(img, buf, {X(p) - 10, H - mb + 22}, cv::FONT_HERSHEY_SIMPLEX, 0.45,
                    axis, 1, cv::LINE_AA);
    }
    cv::line(img, {ml, mt}, {ml, H - mb}, axis, 1);
    cv::line(img, {ml, H - mb}, {W - mr, H - mb}, axis, 1);
    cv::putText(img, title, {ml, mt - 18}, cv::FONT_HERSHEY_SIMPLEX, 0.7, axis, 1,
                cv::LINE_AA);
    cv::putText(img, "pad (um)", {(W - ml - mr) / 2 + ml - 30, H - 18},
                cv::FONT_HERSHEY_SIMPLEX, 0.5, axis, 1, cv::LINE_AA);

    const std::map<std::string, cv::Scalar> palette = {
        {"bce", cv::Scalar(60, 60, 230)},             // red
        {"focal", cv::Scalar(60, 160, 60)},           // green
        {"jaccard", cv::Scalar(160, 60, 160)},        // purple
        {"bce_log_jaccard", cv::Scalar(230, 120, 40)} // blue
    };
    int legend_y = mt + 10;
    for (const auto& [loss, ys] : series) {
        auto it = palette.find(loss);
        const cv::Scalar color =
            it != palette.end() ? it->second : cv::Scalar(30, 30, 30);
        for (std::size_t i = 0; i + 1 < ys.size(); ++i)
            cv::line(img, {X(pads[i]), Y(ys[i])}, {X(pads[i + 1]), Y(ys[i + 1])}, color,
                     2, cv::LINE_AA);
        for (std::size_t i = 0; i < ys.size(); ++i)
            cv::circle(img, {X(pads[i]), Y(ys[i])}, 4, color, cv::FILLED, cv::LINE_AA);
        cv::line(img, {W - mr - 170, legend_y}, {W - mr - 140, legend_y}, color, 2,
                 cv::LINE_AA);
        cv::putText(img, loss, {W - mr - 132, legend_y + 5}, cv::FONT_HERSHEY_SIMPLEX,
                    0.5, axis, 1, cv::LINE_AA);
        legend_y += 22;
    }
    std::filesystem::create_directories(out_path.parent_path());
    if (!cv::imwrite(out_path.string(), img))
        throw UnwritablePathError(out_path.string());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// report: metric-vs-pad curves (median IoU, Dice, VS; one line per loss) and
// the summary table. Soft-checks that medians do not decrease as the band
// grows — a decrease is suspicious but not an error.
inline int cmd_report(const RunConfig& cfg) {
    const RunLayout L(cfg.run_dir);
    RunLock lock(L);
    detail::stage_config(L, cfg);
    const auto rows = detail::read_all_metric_rows(L);
    if (rows.empty())
        throw Error("empty report: no metric rows under " + L.metrics_dir().string() +
                    " (run `evaluate` first)");
    const auto summary = detail::summarize(rows);

    std::set<std::string> losses;
    for (const auto& [key, _] : summary) losses.insert(key.loss);
    const std::vector<double>& pads = cfg.pads_um;

    // per metric: loss -> medians ordered by pad
    std::map<std::string, std::vector<double>> iou, dice, vs;
    for (const auto& loss : losses) {
        for (double pad : pads) {
            auto it = summary.find({loss, pad});
            if (it == summary.end())
                throw Error("report: loss " + loss + " has no rows at pad " +
                            std::to_string(pad) + " um; re-run evaluate");
            iou[loss].push_back(it->second.median_iou);
            dice[loss].push_back(it->second.median_dice);
            vs[loss].push_back(it->second.median_vs);
        }
        for (std::size_t i = 1; i < iou[loss].size(); ++i)
            if (iou[loss][i] < iou[loss][i - 1] - 1e-12)
                std::cerr << "warning: median IoU for " << loss
                          << " decreases between pad " << pads[i - 1] << " and "
                          << pads[i] << " um (" << iou[loss][i - 1] << " -> "
                          << iou[loss][i] << ")\n";
    }

    detail::draw_metric_plot(L.report_dir() / "median_iou_vs_pad.png",
                             "Median banded IoU vs pad", pads, iou);
    detail::draw_metric_plot(L.report_dir() / "median_dice_vs_pad.png",
                             "Median banded Dice vs pad", pads, dice);
    detail::draw_metric_plot(L.report_dir() / "median_vs_vs_pad.png",
                             "Median volumetric similarity vs pad", pads, vs);
    detail::write_summary_table(L.report_dir() / "summary_table.csv", summary);
    detail::write_marker(L, "report", cfg,
                         {{"losses", std::vector<std::string>(losses.begin(),
                                                              losses.end())},
                          {"pads", pads.size()}});
    std::cout << "report: wrote 3 plots and summary table under "
              << L.report_dir().string() << '\n';
    return 0;
}

}  // namespace ctseg
