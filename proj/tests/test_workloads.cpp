#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <string>

#include "support/run.hpp"
#include "support/tempdir.hpp"

using testsup::run_command;
using testsup::selfreport;

namespace {

std::string tool(const std::string& name) {
    return std::string(SYNMIRROR_TOOL_DIR) + "/" + name;
}

// Iterations that keep one spin run around the requested wall time.
unsigned long long spin_iterations_for(double seconds) {
    unsigned long long probe = 20'000'000;
    double t = 0.0;
    for (int i = 0; i < 8; ++i) {
        auto r = run_command({tool("spin"), std::to_string(probe)});
        REQUIRE(r.exit_code == 0);
        t = r.seconds;
        if (t > 0.25) break;
        probe *= 4;
    }
    return static_cast<unsigned long long>(double(probe) * seconds / t);
}

}  // namespace

TEST_CASE("spin reports exactly the requested iterations") {
    auto r = run_command({tool("spin"), "1000000"});
    REQUIRE(r.exit_code == 0);
    auto report = selfreport(r.out);
    REQUIRE(report.at("kind") == "spin");
    REQUIRE(report.at("iterations") == "1000000");
}

TEST_CASE("spin accepts scientific-notation sizes") {
    auto r = run_command({tool("spin"), "1e6"});
    REQUIRE(r.exit_code == 0);
    REQUIRE(selfreport(r.out).at("iterations") == "1000000");
}

TEST_CASE("zero-iteration spin returns almost immediately") {
    auto r = run_command({tool("spin"), "0"});
    REQUIRE(r.exit_code == 0);
    REQUIRE(r.seconds < 0.1);
}

TEST_CASE("doubling spin iterations doubles its runtime") {
    unsigned long long base = spin_iterations_for(0.5);
    // Paired back-to-back so a host speed phase hits both arms of a ratio;
    // the median of three ratios rides out the remaining drift.
    std::vector<double> ratios;
    for (int i = 0; i < 3; ++i) {
        auto r1 = run_command({tool("spin"), std::to_string(base)});
        auto r2 = run_command({tool("spin"), std::to_string(2 * base)});
        REQUIRE(r1.exit_code == 0);
        REQUIRE(r2.exit_code == 0);
        ratios.push_back(r2.seconds / r1.seconds);
    }
    std::sort(ratios.begin(), ratios.end());
    REQUIRE(ratios[1] > 1.7);
    REQUIRE(ratios[1] < 2.3);
}

TEST_CASE("writer writes exactly the requested bytes") {
    testsup::TempDir dir;
    auto r = run_command(
        {tool("writer"), "67108864", "1048576", dir.path() + "/w.dat"});
    REQUIRE(r.exit_code == 0);
    auto report = selfreport(r.out);
    REQUIRE(report.at("kind") == "writer");
    REQUIRE(report.at("bytes") == "67108864");
    // Scratch is cleaned up after the run.
    REQUIRE_FALSE(std::filesystem::exists(dir.path() + "/w.dat"));
}

TEST_CASE("writer handles a final partial block") {
    testsup::TempDir dir;
    auto r = run_command({tool("writer"), "100001", "4096", dir.path() + "/w.dat"});
    REQUIRE(r.exit_code == 0);
    REQUIRE(selfreport(r.out).at("bytes") == "100001");
}

TEST_CASE("reader reads the requested volume, rewinding as needed") {
    testsup::TempDir dir;
    std::string src = dir.path() + "/src.dat";
    {
        std::ofstream out(src, std::ios::binary);
        std::string chunk(1 << 16, 'r');
        out << chunk;
    }
    auto r = run_command({tool("reader"), "1048576", "4096", src});
    REQUIRE(r.exit_code == 0);
    auto report = selfreport(r.out);
    REQUIRE(report.at("kind") == "reader");
    REQUIRE(report.at("bytes") == "1048576");
}

TEST_CASE("reader on a missing file exits nonzero") {
    auto r = run_command({tool("reader"), "1024", "512", "/nonexistent-src.dat"});
    REQUIRE(r.exit_code != 0);
}

TEST_CASE("staircase reports step times steps as its peak") {
    auto r = run_command({tool("staircase"), "16777216", "4", "0.05"});
    REQUIRE(r.exit_code == 0);
    auto report = selfreport(r.out);
    REQUIRE(report.at("kind") == "staircase");
    REQUIRE(report.at("peak_bytes") == std::to_string(4ULL * 16777216));
}

TEST_CASE("mixed reports its scripted compute and write volumes") {
    testsup::TempDir dir;
    auto r = run_command({tool("mixed"), "c:0.2", "w:2097152", "cw:0.2:1048576"},
                         dir.path());
    REQUIRE(r.exit_code == 0);
    auto report = selfreport(r.out);
    REQUIRE(report.at("kind") == "mixed");
    REQUIRE(report.at("bytes_written") == "3145728");
    REQUIRE(std::stod(report.at("compute_seconds")) == Catch::Approx(0.4));
    REQUIRE(r.seconds > 0.4);
    // Scratch removed on exit.
    bool leftover = false;
    for (const auto& e : std::filesystem::directory_iterator(dir.path()))
        if (e.path().extension() == ".dat") leftover = true;
    REQUIRE_FALSE(leftover);
}

TEST_CASE("workloads reject malformed arguments") {
    REQUIRE(run_command({tool("spin")}).exit_code == 2);
    REQUIRE(run_command({tool("spin"), "-5"}).exit_code == 2);
    REQUIRE(run_command({tool("writer"), "1x"}).exit_code == 2);
    REQUIRE(run_command({tool("mixed"), "q:1"}).exit_code == 2);
}
