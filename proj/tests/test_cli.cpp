#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <regex>

#include <nlohmann/json.hpp>

#include "latentiqa/cli.hpp"
#include "test_support.hpp"

using namespace liqa;

namespace {

struct CliRun {
    int code = 0;
    std::string out;
    std::string err;
};

CliRun run(std::vector<std::string> args) {
    args.insert(args.begin(), "liqa");
    std::vector<const char*> argv;
    for (const std::string& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

/// Runs the installed binary; returns exit status and captured stdout.
std::pair<int, std::string> run_binary(const std::string& args) {
    const std::string cmd = std::string(LIQA_CLI_PATH) + " " + args + " 2>/dev/null";
    FILE* pipe = ::popen(cmd.c_str(), "r");
    std::string out;
    char buf[256];
    while (std::fgets(buf, sizeof(buf), pipe)) out += buf;
    const int status = ::pclose(pipe);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::size_t count_lines(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string l; std::getline(in, l);) n += !l.empty();
    return n;
}

} // namespace

TEST(Cli, NoSubcommandIsUsageError) {
    const CliRun r = run({});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("Subcommands"), std::string::npos);
}

TEST(Cli, UnknownSubcommandIsUsageError) {
    const CliRun r = run({"frobnicate"});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("train"), std::string::npos);
    EXPECT_NE(r.err.find("export-features"), std::string::npos);
}

TEST(Cli, HelpExitsZero) {
    EXPECT_EQ(run({"--help"}).code, 0);
    EXPECT_EQ(run({"score", "--help"}).code, 0);
}

TEST(Cli, MissingRequiredOptionIsUsageError) {
    EXPECT_EQ(run({"score", "--image", "x.ppm"}).code, 2);
}

TEST(Cli, BadOverridesReported) {
    const auto dir = fixtures::temp_dir("cli-bad");
    CliRun r = run({"synth-data", "--out-dir", dir.string(), "--set", "synth_count"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("synth_count"), std::string::npos);
    r = run({"synth-data", "--out-dir", dir.string(), "--set", "no_such_key=3"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("no_such_key"), std::string::npos);
    r = run({"score", "--image", "x.ppm", "--checkpoint", (dir / "none.liqa").string()});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("missing-checkpoint"), std::string::npos) << r.err;
}

TEST(Cli, BinaryExitCodes) {
    EXPECT_EQ(run_binary("frobnicate").first, 2);
    EXPECT_EQ(run_binary("").first, 2);
    EXPECT_EQ(run_binary("--help").first, 0);
}

class CliEndToEnd : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        root = new std::filesystem::path(fixtures::temp_dir("cli-e2e"));
        std::ofstream(*root / "run.cfg") << "# tiny run\n"
                                            "resolution = 32\nbase_width = 16\nd_tau = 16\nattn_dim = 16\n"
                                            "context_length = 4\neval_timestep_count = 2\nepochs = 1\nbatch_size = 4\n"
                                            "synth_count = 20\nseed = 5\n";
    }
    static void TearDownTestSuite() { delete root; }

    static std::vector<std::string> common(const std::string& out) {
        return {"--config", (*root / "run.cfg").string(), "--out-dir", (*root / out).string()};
    }
    static std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
        a.insert(a.end(), b.begin(), b.end());
        return a;
    }

    static std::filesystem::path* root;
};

std::filesystem::path* CliEndToEnd::root = nullptr;

TEST_F(CliEndToEnd, AllSubcommands) {
    const std::filesystem::path out = *root / "out";
    const std::string cfg = (*root / "run.cfg").string();

    CliRun r = run(with({"synth-data"}, common("out")));
    ASSERT_EQ(r.code, 0) << r.err;
    const std::filesystem::path manifest = out / "data" / "manifest.tsv";
    ASSERT_TRUE(std::filesystem::exists(manifest));
    EXPECT_EQ(load_manifest(manifest).records.size(), 20u);

    ::setenv("LIQA_EPOCHS", "2", 1);
    r = run(with({"train", "--manifest", manifest.string()}, common("out")));
    ::unsetenv("LIQA_EPOCHS");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(std::filesystem::exists(out / "checkpoint.liqa"));
    EXPECT_TRUE(std::filesystem::exists(out / "checkpoint.liqa.cfg"));
    EXPECT_EQ(count_lines(out / "train_history.jsonl"), 2u);  // environment beats the config file
    EXPECT_NE(r.err.find("epoch 2 loss"), std::string::npos);

    ::setenv("LIQA_EPOCHS", "3", 1);
    r = run(with({"train", "--manifest", manifest.string(), "--set", "epochs=1"}, common("out-set")));
    ::unsetenv("LIQA_EPOCHS");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(count_lines(*root / "out-set" / "train_history.jsonl"), 1u);  // --set beats the environment

    r = run(with({"eval", "--manifest", manifest.string(), "--checkpoint", (out / "checkpoint.liqa").string(), "--set",
                  "lambda=0.5"},
                 common("out")));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("SRCC"), std::string::npos);
    EXPECT_NE(r.err.find("'lambda' is fixed by the checkpoint"), std::string::npos);
    const nlohmann::json res = nlohmann::json::parse(read_file_bytes(out / "results.jsonl"));
    EXPECT_EQ(res["train_db"], "synthetic-gaussian_blur");
    EXPECT_EQ(res["count"], 4);
    EXPECT_EQ(count_lines(out / "predictions.jsonl"), 4u);
    EXPECT_TRUE(std::filesystem::exists(out / "results.txt"));

    const Manifest m = load_manifest(manifest);
    const std::string img = m.resolve(m.records[0]).string();
    r = run({"score", "--image", img, "--checkpoint", (out / "checkpoint.liqa").string(), "--config", cfg});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(std::regex_match(r.out, std::regex(R"([-+]?[0-9]*\.?[0-9]+([eE][-+]?[0-9]+)?\n)"))) << r.out;
    const ModelBundle b = load_checkpoint(out / "checkpoint.liqa");
    Rng rng = image_rng(b.config.seed, m.records[0].image_id);
    EXPECT_EQ(std::stod(r.out), score_image(read_image(img), b, rng));

    const auto bin = run_binary("score --image " + img + " --checkpoint " + (out / "checkpoint.liqa").string());
    EXPECT_EQ(bin.first, 0);
    EXPECT_EQ(bin.second, r.out);

    std::ofstream(*root / "tiny.grid") << "base:\nwide-lambda: lambda=0.3\n";
    r = run(with({"ablate", "--grid", (*root / "tiny.grid").string(), "--manifest", manifest.string()}, common("out")));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(count_lines(out / "ablation_tiny.jsonl"), 2u);
    EXPECT_TRUE(std::filesystem::exists(out / "ablation_tiny.txt"));
    EXPECT_EQ(read_file_bytes(out / "ablation_tiny.svg").rfind("<svg", 0), 0u);

    r = run(with({"export-features", "--manifest", manifest.string(), "--checkpoint", (out / "checkpoint.liqa").string(),
                  "--split", "all"},
                 common("out")));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(count_lines(out / "features.jsonl"), 20u);

    const nlohmann::json index = nlohmann::json::parse(read_file_bytes(out / "outputs.json"));
    std::set<std::string> listed;
    for (const auto& f : index["files"]) {
        listed.insert(f["path"].get<std::string>());
        EXPECT_TRUE(std::filesystem::exists(out / f["path"].get<std::string>())) << f["path"];
        EXPECT_EQ(f["bytes"].get<std::uintmax_t>(), std::filesystem::file_size(out / f["path"].get<std::string>()));
    }
    for (const char* f : {"data/manifest.tsv", "checkpoint.liqa", "checkpoint.liqa.cfg", "train_history.jsonl",
                          "predictions.jsonl", "results.jsonl", "results.txt", "ablation_tiny.jsonl", "ablation_tiny.txt",
                          "ablation_tiny.svg", "features.jsonl"})
        EXPECT_TRUE(listed.count(f)) << f;
}

TEST_F(CliEndToEnd, UnknownGridFails) {
    const CliRun r = run(with({"ablate", "--grid", "table99", "--manifest", (*root / "none.tsv").string()}, common("grid")));
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("table99"), std::string::npos);
}
