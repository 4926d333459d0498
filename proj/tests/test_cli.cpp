// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct Result {
    int code = -1;
    std::string out;
};

Result xpg(const std::string& args) {
    const std::string cmd = std::string(XPG_CLI_PATH) + " " + args + " 2>&1";
    Result r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    char buf[4096];
    size_t n;
    while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("xpg_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }
    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    fs::path dir_;
};

const std::string kSmall = "--layers 4 --experts 4 --hidden 32 --intermediate 64";

}  // namespace

TEST_F(Cli, GenerateIsDeterministicAndSized) {
    ASSERT_EQ(xpg("generate -o " + path("a.xpgw")).code, 0);
    ASSERT_EQ(xpg("generate -o " + path("b.xpgw")).code, 0);
    EXPECT_EQ(slurp(path("a.xpgw")), slurp(path("b.xpgw")));
    EXPECT_EQ(fs::file_size(path("a.xpgw")), 40u + 8u * 16u * 196608u);
    const auto again = xpg("generate -o " + path("a.xpgw"));
    EXPECT_EQ(again.code, 3) << again.out;
    EXPECT_EQ(xpg("generate -f -o " + path("a.xpgw")).code, 0);
}

TEST_F(Cli, ValidationErrors) {
    EXPECT_EQ(xpg("--layers 0 generate -o " + path("x")).code, 1);
    EXPECT_EQ(xpg("generate --layers 1 -o " + path("x")).code, 1);
    EXPECT_EQ(xpg("frobnicate").code, 1);
    EXPECT_EQ(xpg("").code, 1);
    EXPECT_EQ(xpg("run --sabotage nonsense").code, 1);
    EXPECT_EQ(xpg("plan --io-balance maybe").code, 1);
    std::ofstream(path("bad.yaml")) << "model:\n  layerz: 3\n";
    const auto bad = xpg("--config " + path("bad.yaml") + " simulate");
    EXPECT_EQ(bad.code, 1);
    EXPECT_NE(bad.out.find("model.layerz"), std::string::npos) << bad.out;
    EXPECT_EQ(xpg("--config " + path("missing.yaml") + " simulate").code, 3);
    EXPECT_EQ(xpg("--help").code, 0);
}

TEST_F(Cli, CompressVerifyAndCorruption) {
    ASSERT_EQ(xpg("generate -o " + path("m.xpgw")).code, 0);
    const auto c = xpg("compress -i " + path("m.xpgw") + " -o " + path("m.xpgc"));
    ASSERT_EQ(c.code, 0) << c.out;
    const auto v = xpg("verify " + path("m.xpgc") + " " + path("m.xpgw"));
    EXPECT_EQ(v.code, 0);
    EXPECT_NE(v.out.find("identical; ratio "), std::string::npos) << v.out;
    const double ratio = std::stod(v.out.substr(v.out.find("ratio ") + 6));
    EXPECT_LE(ratio, 0.85);

    // Truncate the last record.
    const std::string full = slurp(path("m.xpgc"));
    std::ofstream(path("t.xpgc"), std::ios::binary) << full.substr(0, full.size() - 100);
    const auto t = xpg("verify " + path("t.xpgc") + " " + path("m.xpgw"));
    EXPECT_EQ(t.code, 3);
    EXPECT_NE(t.out.find("TruncatedStream"), std::string::npos) << t.out;
    EXPECT_NE(t.out.find("(layer=8, expert=16, kind=2)"), std::string::npos) << t.out;

    // Same geometry, different weights.
    ASSERT_EQ(xpg("--seed 2 generate -o " + path("other.xpgw")).code, 0);
    const auto mm = xpg("verify " + path("m.xpgc") + " " + path("other.xpgw"));
    EXPECT_EQ(mm.code, 2);
    EXPECT_NE(mm.out.find("MISMATCH at tensor (layer=1, expert=1, kind=1)"), std::string::npos) << mm.out;
}

TEST_F(Cli, RunDefaultAndReport) {
    const auto r = xpg("run -r " + path("r.json"));
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("bit-identical, 0 violations"), std::string::npos) << r.out;
    const auto j = nlohmann::json::parse(slurp(path("r.json")));
    EXPECT_TRUE(j["bit_identical"].get<bool>());
    EXPECT_EQ(j["checksum"], j["baseline_checksum"]);
    EXPECT_EQ(j["violation_count"], 0);
    EXPECT_EQ(j["arena_peak_bytes"], 2u * 16u * 196608u);
    EXPECT_EQ(j["intervals"].size(), 3u * 8u);
}

TEST_F(Cli, RunFromModelFileInSequentialMode) {
    ASSERT_EQ(xpg(kSmall + " generate -o " + path("m.xpgw")).code, 0);
    const auto r = xpg(kSmall + " --sequential --balanced run -m " + path("m.xpgw"));
    EXPECT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("bit-identical"), std::string::npos);
}

TEST_F(Cli, SabotageFailsLoudly) {
    const auto r = xpg(kSmall + " run --sabotage 2:3 -r " + path("s.json"));
    EXPECT_EQ(r.code, 2) << r.out;
    EXPECT_NE(r.out.find("violation: RAW"), std::string::npos) << r.out;
    const auto j = nlohmann::json::parse(slurp(path("s.json")));
    EXPECT_GE(j["violation_count"].get<int>(), 1);
}

TEST_F(Cli, SeedBatch) {
    const auto r = xpg(kSmall + " --iterations 2 run --seeds 50 -r " + path("b.json"));
    EXPECT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("pass 50/50"), std::string::npos) << r.out;
    EXPECT_EQ(nlohmann::json::parse(slurp(path("b.json"))).size(), 50u);
}

TEST_F(Cli, SimulateIsDeterministicCsv) {
    ASSERT_EQ(xpg("--noise 0.1 simulate -o " + path("a.csv")).code, 0);
    ASSERT_EQ(xpg("--noise 0.1 simulate -o " + path("b.csv")).code, 0);
    const std::string a = slurp(path("a.csv"));
    EXPECT_EQ(a, slurp(path("b.csv")));
    EXPECT_EQ(a.substr(0, a.find('\n')), "iter,alpha,kv_bytes,tau_load,tau_comp,iter_time,throughput,rho");
    EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 2001);
}

TEST_F(Cli, SweepHasOneKnee) {
    const auto r = xpg("sweep-alpha -o " + path("s.csv"));
    ASSERT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("knee: closed-form 0.7615"), std::string::npos) << r.out;
    std::istringstream in(slurp(path("s.csv")));
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "alpha,tau_load,tau_comp");
    std::vector<double> comp;
    while (std::getline(in, line)) comp.push_back(std::stod(line.substr(line.rfind(',') + 1)));
    ASSERT_EQ(comp.size(), 16u);
    int changes = 0;
    for (size_t i = 1; i + 1 < comp.size(); ++i) {
        const bool left_flat = comp[i] == comp[i - 1];
        const bool right_flat = comp[i + 1] == comp[i];
        changes += left_flat != right_flat ? 1 : 0;
    }
    EXPECT_EQ(changes, 1);
}

namespace {

std::vector<std::vector<double>> read_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        std::vector<double> row;
        std::istringstream cells(line);
        std::string cell;
        while (std::getline(cells, cell, ',')) row.push_back(cell == "nan" ? NAN : std::stod(cell));
        rows.push_back(row);
    }
    return rows;
}

}  // namespace

TEST_F(Cli, PlanTracesShowDipsOnlyWithoutBalance) {
    const std::string cfg = "--config " XPG_SOURCE_DIR "/configs/adaptation.yaml";
    ASSERT_EQ(xpg(cfg + " plan -o " + path("on.csv")).code, 0);
    ASSERT_EQ(xpg(cfg + " plan --io-balance off -o " + path("off.csv")).code, 0);
    const auto on = read_csv(slurp(path("on.csv")));
    const auto off = read_csv(slurp(path("off.csv")));
    ASSERT_EQ(on.size(), 1800u);
    EXPECT_EQ(slurp(path("on.csv")).substr(0, 36), "iter,rho,alpha,C_kv,C_exp,throughput");
    for (size_t i = 300; i < 1800; i += 300) {
        EXPECT_LT(off[i][5], 0.95 * on[i][5]) << "iter " << i;
        EXPECT_EQ(on[i][5], on[i - 1][5]) << "iter " << i;
    }
}

TEST_F(Cli, PlanAlphaFallsUnderGrowingKv) {
    const auto r = xpg("--cooldown 1 plan -o " + path("p.csv"));
    ASSERT_EQ(r.code, 0) << r.out;
    std::ofstream(path("mem.yaml")) << "sim:\n  tau_comp_theory: 1.0\n  max_new_tokens: 5000\n";
    ASSERT_EQ(xpg("--config " + path("mem.yaml") + " --cooldown 1 plan -f -o " + path("p.csv")).code, 0);
    const auto rows = read_csv(slurp(path("p.csv")));
    double prev = 1.0;
    for (const auto& row : rows) {
        ASSERT_LE(row[2], prev);
        prev = row[2];
    }
    EXPECT_LT(prev, 1.0);
}
