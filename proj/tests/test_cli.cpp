// End-to-end coverage of the command line tool: each case drives the real
// binary through fork/exec and asserts on exit codes, stdout documents, and
// store side effects. Hardware-independent: estimated counters are enabled
// explicitly wherever a profile is taken.

#include <catch2/catch_amalgamated.hpp>

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>
#include <synmirror/perf.hpp>
#include <synmirror/profile.hpp>
#include <synmirror/store.hpp>
#include <synmirror/system.hpp>

#include "support/run.hpp"
#include "support/tempdir.hpp"

using testsup::RunResult;
using testsup::TempDir;
using testsup::run_command;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string tool_path(const std::string& name) {
    return std::string(SYNMIRROR_TOOL_DIR) + "/" + name;
}

// Builds an /usr/bin/env invocation so every case pins its own store and
// counter fallback instead of inheriting ambient settings.
std::vector<std::string> cli(const std::string& store,
                             std::vector<std::string> args,
                             std::vector<std::string> extra_env = {}) {
    std::vector<std::string> argv{"/usr/bin/env",
                                  "-u", "SYNMIRROR_STORE",
                                  "-u", "SYNMIRROR_DB",
                                  "-u", "SYNMIRROR_SAMPLE_PERIOD",
                                  "-u", "SYNMIRROR_FALLBACK",
                                  "SYNMIRROR_FALLBACK=1"};
    if (!store.empty()) argv.push_back("SYNMIRROR_STORE=" + store);
    for (auto& e : extra_env) argv.push_back(e);
    argv.push_back(tool_path("synmirror"));
    for (auto& a : args) argv.push_back(std::move(a));
    return argv;
}

RunResult run_cli(const std::string& store, std::vector<std::string> args,
                  std::vector<std::string> extra_env = {}) {
    return run_command(cli(store, std::move(args), std::move(extra_env)));
}

// Runs the tool under `sh -c` with stderr folded into stdout, for cases that
// assert on diagnostic text.
RunResult run_cli_merged(const std::string& store, const std::string& tail) {
    std::string cmd = "SYNMIRROR_FALLBACK=1 SYNMIRROR_STORE='" + store + "' '" +
                      tool_path("synmirror") + "' " + tail + " 2>&1";
    return run_command({"/bin/sh", "-c", cmd});
}

int count_stored_profiles(const std::string& store) {
    int n = 0;
    std::error_code ec;
    if (!fs::is_directory(store, ec)) return 0;
    for (auto& dir : fs::recursive_directory_iterator(store, ec))
        if (dir.path().extension() == ".profile") ++n;
    return n;
}

// Minimal profile written straight to a file so emulate cases do not need a
// live profiling run first.
std::string write_tiny_profile(const TempDir& dir, const std::string& name) {
    synmirror::Profile p;
    p.command = "synthetic-tiny";
    p.system = synmirror::detect_system();
    p.sample_period = 0.1;
    p.runtime = 0.2;
    p.counter_source = synmirror::CounterSource::estimated;
    p.watchers = {{"cpu", "estimated"}, {"storage", "enabled"}};
    for (int i = 0; i < 2; ++i) {
        synmirror::CpuSample c;
        c.t = 0.05 + 0.1 * i;
        c.cycles_used = 40'000'000;
        p.cpu_series.push_back(c);
        synmirror::StorageSample s;
        s.t = c.t;
        s.bytes_written = 16 * 1024;
        p.storage_series.push_back(s);
    }
    p.totals = synmirror::integrate_totals(p);
    std::string path = dir.path() + "/" + name;
    std::ofstream out(path);
    out << synmirror::serialize_profile(p);
    return path;
}

}  // namespace

TEST_CASE("profile stores a run and prints its id") {
    TempDir store;
    auto r = run_cli(store.path(),
                     {"profile", "--period", "0.2", "--tag", "suite=cli", "--",
                      tool_path("spin"), "40M"});
    CAPTURE(r.out);
    REQUIRE(r.exit_code == 0);
    CHECK(r.out.find("profile id:") != std::string::npos);
    // Child stdout passes through untouched in table mode.
    CHECK(r.out.find("SELFREPORT kind=spin") != std::string::npos);
    CHECK(count_stored_profiles(store.path()) == 1);
}

TEST_CASE("profile relays the child's exit status above the flag range") {
    TempDir store;
    auto r = run_cli(store.path(), {"profile", "--", "/bin/sh", "-c", "exit 7"});
    CHECK(r.exit_code == 17);
    // A failing run is still worth keeping.
    CHECK(count_stored_profiles(store.path()) == 1);
}

TEST_CASE("profile separates its own flags from the child's") {
    TempDir store;
    auto r = run_cli(store.path(),
                     {"profile", "--", "/bin/echo", "--store", "ignored"});
    REQUIRE(r.exit_code == 0);
    CHECK(r.out.find("--store ignored") != std::string::npos);
}

TEST_CASE("profile flag errors exit 2 and launch failures exit 3") {
    TempDir store;
    CHECK(run_cli(store.path(), {"profile", "--period", "0.01", "--",
                                 "/bin/true"})
              .exit_code == 2);
    CHECK(run_cli(store.path(), {"profile"}).exit_code == 2);
    CHECK(run_cli(store.path(), {"profile", "--tag", "not-a-pair", "--",
                                 "/bin/true"})
              .exit_code == 2);
    auto r = run_cli(store.path(), {"profile", "--", "/nonexistent-tool-xyz"});
    CHECK(r.exit_code == 3);
    CHECK(count_stored_profiles(store.path()) == 0);
}

TEST_CASE("profile without usable counters reports a capability error") {
    if (synmirror::PerfSession::available())
        SKIP("hardware counters present; the refusal path cannot trigger");
    TempDir store;
    std::string cmd = "SYNMIRROR_STORE='" + store.path() + "' '" +
                      tool_path("synmirror") + "' profile -- /bin/true 2>&1";
    auto r = run_command({"/usr/bin/env", "-u", "SYNMIRROR_FALLBACK",
                          "/bin/sh", "-c", cmd});
    CHECK(r.exit_code == 4);
    CHECK(r.out.find("fallback") != std::string::npos);
}

TEST_CASE("profile --json emits one document with the child silenced") {
    TempDir store;
    // The marker is assembled by the shell so it cannot leak into the
    // document via the recorded command string.
    auto r = run_cli(store.path(),
                     {"--json", "profile", "--", "/bin/sh", "-c",
                      "echo NOI''SE; exit 0"});
    CAPTURE(r.out);
    REQUIRE(r.exit_code == 0);
    CHECK(r.out.find("NOISE") == std::string::npos);
    json doc = json::parse(r.out);  // throws if anything else leaked
    CHECK(doc["accounting"]["exit_code"] == 0);
    CHECK(doc["id"].get<std::string>().find(".profile") != std::string::npos);
    CHECK(doc["samples"].contains("cpu"));
}

TEST_CASE("profile --out writes a file and leaves the store alone") {
    TempDir store, dir;
    std::string out = dir.path() + "/run.profile";
    auto r = run_cli(store.path(),
                     {"profile", "--out", out, "--", "/bin/true"});
    REQUIRE(r.exit_code == 0);
    std::ifstream in(out);
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    auto p = synmirror::parse_profile(text);
    CHECK(p.command == "/bin/true");
    CHECK(count_stored_profiles(store.path()) == 0);
}

TEST_CASE("emulate --match round-trips a stored profile") {
    TempDir store, scratch;
    std::string target = scratch.path() + "/w.dat";
    auto prof = run_cli(store.path(),
                        {"profile", "--period", "0.2", "--",
                         tool_path("writer"), "6M", "64K", target});
    REQUIRE(prof.exit_code == 0);
    fs::remove(target);

    std::string match = tool_path("writer") + " 6M 64K " + target;
    auto em = run_cli(store.path(),
                      {"--json", "emulate", "--match", match, "--fs",
                       scratch.path()});
    CAPTURE(em.out);
    REQUIRE(em.exit_code == 0);
    json doc = json::parse(em.out);
    CHECK(doc["profile_command"] == match);
    CHECK(doc["consumed"]["bytes_written"].get<long long>() >= 6 * 1024 * 1024);
    CHECK(doc["tx"].get<double>() > 0.0);
}

TEST_CASE("emulate exits 5 when nothing matches") {
    TempDir store;
    auto r = run_cli_merged(store.path(), "emulate --match never-profiled");
    CHECK(r.exit_code == 5);
    CHECK(r.out.find("no profile") != std::string::npos);
}

TEST_CASE("emulate flag errors exit 2") {
    TempDir store;
    CHECK(run_cli(store.path(), {"emulate"}).exit_code == 2);
    CHECK(run_cli(store.path(), {"emulate", "--match", "x", "--profile", "y"})
              .exit_code == 2);
    CHECK(run_cli(store.path(),
                  {"emulate", "--match", "x", "--mode", "bogus"})
              .exit_code == 2);
}

TEST_CASE("emulate echoes its configuration in the report") {
    TempDir store, dir, scratch;
    std::string prof = write_tiny_profile(dir, "tiny.profile");
    auto r = run_cli(store.path(),
                     {"--json", "emulate", "--profile", prof, "--write-block",
                      "4096", "--fs", scratch.path()});
    CAPTURE(r.out);
    REQUIRE(r.exit_code == 0);
    json doc = json::parse(r.out);
    CHECK(doc["config"]["io_block_size_write"] == 4096);
    CHECK(doc["config"]["fs_target"] == scratch.path());
    CHECK(doc["consumed"]["bytes_written"] == 32 * 1024);
    CHECK(doc["consumed"]["write_requests"] == 8);
    // Replay leaves no scratch files behind on success.
    CHECK(fs::is_empty(scratch.path()));
}

TEST_CASE("emulate failures surface the sample index and exit 6") {
    TempDir store, dir;
    std::string prof = write_tiny_profile(dir, "tiny.profile");
    auto r = run_cli_merged(store.path(), "emulate --profile '" + prof +
                                              "' --fs /proc/no-such-dir");
    CHECK(r.exit_code == 6);
    CHECK(r.out.find("emulation failed") != std::string::npos);
}

TEST_CASE("stats aggregates every stored run of a command") {
    TempDir store;
    for (int i = 0; i < 3; ++i) {
        auto r = run_cli(store.path(),
                         {"profile", "--tag", "suite=stats", "--",
                          tool_path("spin"), "20M"});
        REQUIRE(r.exit_code == 0);
    }
    std::string match = tool_path("spin") + " 20M";

    auto table = run_cli(store.path(), {"stats", "--match", match, "--tag",
                                        "suite=stats"});
    CAPTURE(table.out);
    REQUIRE(table.exit_code == 0);
    CHECK(table.out.find("n=3") != std::string::npos);
    CHECK(table.out.find("cycles_used") != std::string::npos);

    auto js = run_cli(store.path(), {"--json", "stats", "--match", match,
                                     "--tag", "suite=stats"});
    REQUIRE(js.exit_code == 0);
    json doc = json::parse(js.out);
    CHECK(doc["n"] == 3);
    CHECK(doc["command"] == match);
    double mean = doc["metrics"]["cycles_used"]["mean"].get<double>();
    CHECK(mean > 0.0);

    // Table and document must agree: the table cell is the same value the
    // document carries, printed with the same precision.
    char cell[64];
    std::snprintf(cell, sizeof(cell), "%.9g", mean);
    CHECK(table.out.find(cell) != std::string::npos);
}

TEST_CASE("stats exits 5 with no matching runs") {
    TempDir store;
    CHECK(run_cli(store.path(), {"stats", "--match", "never-profiled"})
              .exit_code == 5);
}

TEST_CASE("calibrate persists an entry the next run overwrites") {
    TempDir store;
    auto first = run_cli(store.path(), {"calibrate", "--kernel",
                                        "cache_resident"});
    CAPTURE(first.out);
    REQUIRE(first.exit_code == 0);
    std::string table_path = store.path() + "/calibration.json";
    REQUIRE(fs::exists(table_path));

    auto read_entry = [&] {
        std::ifstream in(table_path);
        json t = json::parse(in);
        REQUIRE(t.contains("cache_resident"));
        return t["cache_resident"];
    };
    json e1 = read_entry();
    CHECK(e1["cycles_per_iteration"].get<double>() > 0.0);

    auto second = run_cli(store.path(), {"--json", "calibrate", "--kernel",
                                         "cache_resident"});
    REQUIRE(second.exit_code == 0);
    json e2 = read_entry();
    CHECK(e2["calibrated_at"].get<double>() >=
          e1["calibrated_at"].get<double>());
    json doc = json::parse(second.out);
    CHECK(doc["kernel"] == "cache_resident");
}

TEST_CASE("calibrate rejects unknown kernels") {
    TempDir store;
    auto r = run_cli_merged(store.path(), "calibrate --kernel no-such-kernel");
    CHECK(r.exit_code == 6);
    CHECK(r.out.find("no-such-kernel") != std::string::npos);
}

TEST_CASE("stress returns once the duration elapses") {
    TempDir store, dir;
    auto r = run_cli(store.path(),
                     {"stress", "--cpu", "0.3", "--mem", "32M", "--duration",
                      "0.6", "--fs", dir.path()});
    CHECK(r.exit_code == 0);
    CHECK(r.seconds >= 0.5);
    CHECK(r.seconds < 10.0);
    CHECK(fs::is_empty(dir.path()));  // ballast file cleaned up
}

TEST_CASE("echo-sink prints its endpoint and stops cleanly on SIGTERM") {
    int fds[2];
    REQUIRE(::pipe(fds) == 0);
    pid_t pid = ::fork();
    REQUIRE(pid >= 0);
    if (pid == 0) {
        ::dup2(fds[1], STDOUT_FILENO);
        ::close(fds[0]);
        ::close(fds[1]);
        std::string tool = tool_path("synmirror");
        ::execl(tool.c_str(), tool.c_str(), "echo-sink", "--port", "0",
                (char*)nullptr);
        _exit(127);
    }
    ::close(fds[1]);

    std::string line;
    char ch;
    while (::read(fds[0], &ch, 1) == 1 && ch != '\n') line.push_back(ch);
    CAPTURE(line);
    CHECK(line.rfind("listening on 127.0.0.1:", 0) == 0);
    int port = std::stoi(line.substr(line.rfind(':') + 1));
    CHECK(port > 0);

    ::kill(pid, SIGTERM);
    int status = 0;
    ::waitpid(pid, &status, 0);
    ::close(fds[0]);
    REQUIRE(WIFEXITED(status));
    CHECK(WEXITSTATUS(status) == 0);
}

TEST_CASE("environment variables pick the store and sample period") {
    TempDir db;
    std::string dbdir = db.path() + "/nested/store";
    // SYNMIRROR_DB is honoured when SYNMIRROR_STORE is unset.
    auto r = run_cli("", {"profile", "--", "/bin/sleep", "0.5"},
                     {"SYNMIRROR_DB=" + dbdir, "SYNMIRROR_SAMPLE_PERIOD=0.2"});
    REQUIRE(r.exit_code == 0);
    CHECK(count_stored_profiles(dbdir) == 1);

    // The configured period reached the profiler: a 0.5 s sleep yields at
    // least two cpu samples at 0.2 s spacing.
    auto js = run_cli("", {"--json", "profile", "--", "/bin/sleep", "0.5"},
                      {"SYNMIRROR_DB=" + dbdir, "SYNMIRROR_SAMPLE_PERIOD=0.2"});
    REQUIRE(js.exit_code == 0);
    json doc = json::parse(js.out);
    CHECK(doc["sample_period"].get<double>() == 0.2);
    CHECK(doc["samples"]["cpu"].get<int>() >= 2);
}

TEST_CASE("missing subcommand exits 2") {
    TempDir store;
    CHECK(run_cli(store.path(), {}).exit_code == 2);
    CHECK(run_cli(store.path(), {"no-such-subcommand"}).exit_code == 2);
}
