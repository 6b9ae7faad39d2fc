// SPDX-License-Identifier: Apache-2.0

#include "core/evaluator.hpp"

#include <cerrno>
#include <cmath>
#include <csignal>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>

#include <poll.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include "core/averaging.hpp"
#include "core/error.hpp"

extern char** environ;

namespace snapsoup {

namespace fs = std::filesystem;

ModelRef ModelRef::snapshot(const std::string& run_id, int index)
{
    return {run_id + "@" + std::to_string(index), run_id, index, nullptr};
}

ModelRef ModelRef::checkpoint_average(const std::string& run_id)
{
    return {run_id + "@ca", run_id, kCaSnapshotIndex, nullptr};
}

ModelRef ModelRef::composite(std::string key, std::shared_ptr<const TensorMap> weights)
{
    return {std::move(key), {}, -1, std::move(weights)};
}

std::string_view backend_name(Backend b)
{
    switch (b) {
    case Backend::ScoreTable:
        return "table";
    case Backend::ExternalCommand:
        return "external";
    case Backend::SyntheticQuadratic:
        return "synthetic";
    }
    return "?";
}

double ScoreTableEvaluator::score(const ModelRef& model, const SplitSpec& split) const
{
    const std::string sid = split.split.to_string();
    if (model.is_pool_entry())
        return pool_.require_score(model.run_id, model.snapshot_index, sid, split.metric);
    if (!model.key.empty())
        if (auto v = pool_.score(model.key, kCaSnapshotIndex, sid, split.metric))
            return *v;
    data_error("unscorable composite '" + (model.key.empty() ? std::string("<anonymous>") : model.key) +
               "': no score record for " + sid + "/" + split.metric);
}

std::vector<std::string> ScoreTableEvaluator::languages(SplitFamily family, const std::string& metric) const
{
    return pool_.languages(family, metric);
}

double RecordFirstEvaluator::score(const ModelRef& model, const SplitSpec& split) const
{
    const std::string sid = split.split.to_string();
    if (model.is_pool_entry())
        if (auto v = pool_.score(model.run_id, model.snapshot_index, sid, split.metric))
            return *v;
    if (model.key.empty())
        return inner_.score(model, split);
    auto memo_key = std::make_pair(model.key, sid + "/" + split.metric);
    {
        std::lock_guard lock(mu_);
        if (auto it = memo_.find(memo_key); it != memo_.end())
            return it->second;
    }
    const double v = inner_.score(model, split);
    std::lock_guard lock(mu_);
    memo_.emplace(std::move(memo_key), v);
    return v;
}

// --- synthetic ---------------------------------------------------------------

const TensorMap& SyntheticTruth::optimum_for(const SplitId& split) const
{
    if (split.family == SplitFamily::SrcDev)
        return source_optimum;
    auto it = language_optima.find(split.language);
    if (it == language_optima.end())
        data_error("synthetic truth has no optimum for language '" + split.language + "'");
    return it->second;
}

std::vector<std::string> SyntheticTruth::languages() const
{
    std::vector<std::string> out;
    for (const auto& [lang, _] : language_optima)
        out.push_back(lang);
    return out;
}

namespace {

nlohmann::json map_to_json(const TensorMap& tm)
{
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, t] : tm)
        j[name] = {{"shape", t.shape}, {"data", t.data}};
    return j;
}

TensorMap map_from_json(const nlohmann::json& j)
{
    TensorMap tm;
    for (const auto& [name, jt] : j.items())
        tm.insert(name, Tensor(jt.at("shape").get<Shape>(), jt.at("data").get<std::vector<float>>()));
    return tm;
}

} // namespace

nlohmann::json truth_to_json(const SyntheticTruth& truth)
{
    nlohmann::json langs = nlohmann::json::object();
    for (const auto& [lang, tm] : truth.language_optima)
        langs[lang] = map_to_json(tm);
    return {{"s0", truth.s0},
            {"curvature", truth.curvature},
            {"target_optimum", map_to_json(truth.target_optimum)},
            {"source_optimum", map_to_json(truth.source_optimum)},
            {"language_optima", std::move(langs)}};
}

SyntheticTruth truth_from_json(const nlohmann::json& j)
{
    SyntheticTruth t;
    try {
        t.s0 = j.at("s0").get<double>();
        t.curvature = j.at("curvature").get<double>();
        t.target_optimum = map_from_json(j.at("target_optimum"));
        t.source_optimum = map_from_json(j.at("source_optimum"));
        for (const auto& [lang, jm] : j.at("language_optima").items())
            t.language_optima.emplace(lang, map_from_json(jm));
    } catch (const nlohmann::json::exception& e) {
        data_error(std::string("malformed synthetic truth: ") + e.what());
    }
    return t;
}

SyntheticTruth load_truth(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
    try {
        return truth_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        data_error(path.string() + ": invalid JSON: " + e.what());
    }
}

double quadratic_score(const TensorMap& weights, const TensorMap& optimum, double s0, double curvature)
{
    const auto report = check_compatibility(weights, optimum);
    if (!report.compatible())
        data_error("model does not match the synthetic optimum: " + report.summary());
    double sq = 0.0;
    auto io = optimum.begin();
    for (auto iw = weights.begin(); iw != weights.end(); ++iw, ++io) {
        const auto& w = iw->second.data;
        const auto& o = io->second.data;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double d = static_cast<double>(w[i]) - static_cast<double>(o[i]);
            sq += d * d;
        }
    }
    return s0 - curvature * sq;
}

double SyntheticQuadraticEvaluator::score(const ModelRef& model, const SplitSpec& split) const
{
    std::shared_ptr<const TensorMap> w = model.weights;
    if (!w) {
        if (!model.is_pool_entry() || !pool_ || !store_)
            data_error("synthetic evaluator needs weights for '" + model.key + "'");
        const Run& run = pool_->run(model.run_id);
        if (model.snapshot_index == kCaSnapshotIndex)
            w = std::make_shared<const TensorMap>(ca_of_run(run, *store_));
        else
            w = store_->load(run, model.snapshot_index);
    }
    return quadratic_score(*w, truth_.optimum_for(split.split), truth_.s0, truth_.curvature);
}

std::vector<std::string> SyntheticQuadraticEvaluator::languages(SplitFamily family, const std::string&) const
{
    if (family == SplitFamily::SrcDev)
        return {};
    return truth_.languages();
}

// --- external command --------------------------------------------------------

std::chrono::seconds timeout_from_env(std::chrono::seconds fallback)
{
    const char* env = std::getenv("SNAPSOUP_EVAL_TIMEOUT_SECS");
    if (!env || !*env)
        return fallback;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v <= 0)
        usage_error(std::string("SNAPSOUP_EVAL_TIMEOUT_SECS must be a positive integer, got '") + env + "'");
    return std::chrono::seconds(v);
}

namespace {

std::vector<std::string> tokenize(const std::string& tmpl)
{
    std::vector<std::string> out;
    std::string cur;
    bool in_token = false;
    char quote = 0;
    for (char c : tmpl) {
        if (quote) {
            if (c == quote)
                quote = 0;
            else
                cur += c;
        } else if (c == '\'' || c == '"') {
            quote = c;
            in_token = true;
        } else if (c == ' ' || c == '\t' || c == '\n') {
            if (in_token)
                out.push_back(std::move(cur));
            cur.clear();
            in_token = false;
        } else {
            cur += c;
            in_token = true;
        }
    }
    if (quote)
        usage_error("unterminated quote in evaluator command template");
    if (in_token)
        out.push_back(std::move(cur));
    return out;
}

void replace_all(std::string& s, std::string_view from, std::string_view to)
{
    for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
        s.replace(pos, from.size(), to);
}

struct Pipe {
    int fd[2] = {-1, -1};
    Pipe()
    {
        if (::pipe(fd) != 0)
            fail(ErrorKind::External, std::string("pipe failed: ") + std::strerror(errno));
    }
    ~Pipe()
    {
        for (int f : fd)
            if (f >= 0)
                ::close(f);
    }
    void close_end(int i)
    {
        if (fd[i] >= 0) {
            ::close(fd[i]);
            fd[i] = -1;
        }
    }
};

struct ProcessResult {
    int status = 0;
    std::string out;
    std::string err;
};

ProcessResult run_process(const std::vector<std::string>& argv, std::chrono::seconds timeout)
{
    Pipe out_pipe;
    Pipe err_pipe;
    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_adddup2(&actions, out_pipe.fd[1], STDOUT_FILENO);
    posix_spawn_file_actions_adddup2(&actions, err_pipe.fd[1], STDERR_FILENO);
    posix_spawn_file_actions_addclose(&actions, out_pipe.fd[0]);
    posix_spawn_file_actions_addclose(&actions, err_pipe.fd[0]);

    std::vector<char*> cargv;
    for (const auto& a : argv)
        cargv.push_back(const_cast<char*>(a.c_str()));
    cargv.push_back(nullptr);

    pid_t pid = 0;
    const int rc = posix_spawnp(&pid, cargv[0], &actions, nullptr, cargv.data(), environ);
    posix_spawn_file_actions_destroy(&actions);
    if (rc != 0)
        fail(ErrorKind::External, "cannot start evaluator '" + argv[0] + "': " + std::strerror(rc));
    out_pipe.close_end(1);
    err_pipe.close_end(1);

    ProcessResult res;
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    pollfd fds[2] = {{out_pipe.fd[0], POLLIN, 0}, {err_pipe.fd[0], POLLIN, 0}};
    std::string* sinks[2] = {&res.out, &res.err};
    int open_fds = 2;
    char buf[4096];
    while (open_fds > 0) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0) {
            ::kill(pid, SIGKILL);
            ::waitpid(pid, nullptr, 0);
            fail(ErrorKind::External,
                 "evaluator timed out after " + std::to_string(timeout.count()) + " s: " + argv[0]);
        }
        const int n = ::poll(fds, 2, static_cast<int>(std::min<long long>(left.count(), 1000)));
        if (n < 0 && errno != EINTR)
            fail(ErrorKind::External, std::string("poll failed: ") + std::strerror(errno));
        for (int i = 0; i < 2; ++i) {
            if (fds[i].fd < 0 || !(fds[i].revents & (POLLIN | POLLHUP | POLLERR)))
                continue;
            const ssize_t got = ::read(fds[i].fd, buf, sizeof(buf));
            if (got > 0) {
                sinks[i]->append(buf, static_cast<std::size_t>(got));
            } else if (got == 0 || errno != EINTR) {
                fds[i].fd = -1;
                --open_fds;
            }
        }
    }
    int status = 0;
    while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
    }
    res.status = status;
    return res;
}

} // namespace

double score_external(const fs::path& model_path, const std::string& split, const std::string& command_template,
                      std::chrono::seconds timeout)
{
    if (command_template.find("{model}") == std::string::npos || command_template.find("{split}") == std::string::npos)
        usage_error("evaluator command template must contain {model} and {split}");
    auto argv = tokenize(command_template);
    if (argv.empty())
        usage_error("empty evaluator command template");
    for (auto& a : argv) {
        replace_all(a, "{model}", model_path.string());
        replace_all(a, "{split}", split);
    }

    const auto res = run_process(argv, timeout);
    if (!WIFEXITED(res.status) || WEXITSTATUS(res.status) != 0) {
        const std::string how = WIFEXITED(res.status) ? "exited with status " + std::to_string(WEXITSTATUS(res.status))
                                                      : "was killed by signal " + std::to_string(WTERMSIG(res.status));
        fail(ErrorKind::External, "evaluator " + how + ": " + res.err);
    }

    std::string_view text = res.out;
    while (!text.empty() && (text.back() == '\n' || text.back() == '\r' || text.back() == ' '))
        text.remove_suffix(1);
    const auto nl = text.rfind('\n');
    const std::string_view last = nl == std::string_view::npos ? text : text.substr(nl + 1);

    double value = 0.0;
    try {
        const auto j = nlohmann::json::parse(last);
        const auto& s = j.at("score");
        if (s.is_number()) {
            value = s.get<double>();
        } else if (s.is_string()) {
            const auto str = s.get<std::string>();
            char* end = nullptr;
            value = std::strtod(str.c_str(), &end);
            if (str.empty() || *end != '\0')
                fail(ErrorKind::External, "malformed evaluator output: score '" + str + "' is not a number");
        } else {
            fail(ErrorKind::External, "malformed evaluator output: score is not a number");
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::External, "malformed evaluator output '" + std::string(last) + "': " + e.what());
    }
    if (!std::isfinite(value))
        fail(ErrorKind::External, "non-finite score from evaluator");
    return value;
}

ExternalCommandEvaluator::ExternalCommandEvaluator(ExternalConfig cfg, const RunPool& pool, const WeightStore* store)
    : cfg_(std::move(cfg)), pool_(pool), store_(store)
{
    if (cfg_.command_template.find("{model}") == std::string::npos ||
        cfg_.command_template.find("{split}") == std::string::npos)
        usage_error("evaluator command template must contain {model} and {split}");
    if (cfg_.max_parallel == 0)
        cfg_.max_parallel = 1;
    if (cfg_.scratch_dir.empty()) {
        std::string tmpl = (fs::temp_directory_path() / "snapsoup-eval-XXXXXX").string();
        if (!::mkdtemp(tmpl.data()))
            fail(ErrorKind::Io, std::string("cannot create scratch directory: ") + std::strerror(errno));
        cfg_.scratch_dir = tmpl;
        owns_scratch_ = true;
    } else {
        fs::create_directories(cfg_.scratch_dir);
    }
}

ExternalCommandEvaluator::~ExternalCommandEvaluator()
{
    if (owns_scratch_) {
        std::error_code ec;
        fs::remove_all(cfg_.scratch_dir, ec);
    }
}

fs::path ExternalCommandEvaluator::model_path(const ModelRef& model) const
{
    if (model.is_pool_entry() && model.snapshot_index >= 1) {
        const auto& snap = pool_.run(model.run_id).snapshot(model.snapshot_index);
        if (snap.weights_path)
            return *snap.weights_path;
    }
    {
        std::lock_guard lock(mu_);
        if (auto it = written_.find(model.key); !model.key.empty() && it != written_.end())
            return it->second;
    }
    std::shared_ptr<const TensorMap> w = model.weights;
    if (!w && model.is_pool_entry() && store_) {
        const Run& run = pool_.run(model.run_id);
        w = model.snapshot_index == kCaSnapshotIndex ? std::make_shared<const TensorMap>(ca_of_run(run, *store_))
                                                     : store_->load(run, model.snapshot_index);
    }
    if (!w)
        data_error("external evaluator needs weights or a weight file for '" + model.key + "'");
    std::lock_guard lock(mu_);
    const auto path = cfg_.scratch_dir / ("model-" + std::to_string(written_count_++) + ".tpak");
    save_tensormap(*w, path);
    if (!model.key.empty())
        written_.emplace(model.key, path);
    return path;
}

double ExternalCommandEvaluator::score(const ModelRef& model, const SplitSpec& split) const
{
    const std::string sid = split.split.to_string();
    std::pair<std::string, std::string> memo_key{model.key, sid + "/" + split.metric};
    if (!model.key.empty()) {
        std::lock_guard lock(mu_);
        if (auto it = memo_.find(memo_key); it != memo_.end())
            return it->second;
    }
    const auto path = model_path(model);
    {
        std::unique_lock lock(mu_);
        slot_.wait(lock, [&] { return running_ < cfg_.max_parallel; });
        ++running_;
    }
    double v = 0.0;
    try {
        v = score_external(path, sid, cfg_.command_template, cfg_.timeout);
    } catch (...) {
        std::lock_guard lock(mu_);
        --running_;
        slot_.notify_one();
        throw;
    }
    std::lock_guard lock(mu_);
    --running_;
    slot_.notify_one();
    if (!model.key.empty())
        memo_.emplace(std::move(memo_key), v);
    return v;
}

std::vector<std::string> ExternalCommandEvaluator::languages(SplitFamily family, const std::string& metric) const
{
    return pool_.languages(family, metric);
}

} // namespace snapsoup
