#pragma once

// Profile persistence. Two backends share one facade: a directory of
// self-describing JSON documents (no size limit) and a remote document
// service reached over HTTP (per-document size cap enforced client-side).

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "synmirror/errors.hpp"
#include "synmirror/profile.hpp"

namespace synmirror {

// Document-backend ceilings. A single stored document may not exceed 16 MiB,
// which caps a profile at roughly 250,000 samples.
inline constexpr std::size_t kDocByteLimit = 16ULL << 20;
inline constexpr std::size_t kDocSampleLimit = 250'000;

// ---------------------------------------------------------------------------
// Keys
// ---------------------------------------------------------------------------

// Command lines are compared after whitespace collapsing; argument order and
// content stay significant.
inline std::string normalize_command(const std::string& command) {
    std::istringstream in(command);
    std::string word, out;
    while (in >> word) {
        if (!out.empty()) out += ' ';
        out += word;
    }
    return out;
}

struct ProfileKey {
    std::string command;  // normalized
    std::map<std::string, std::string> tags;

    bool operator==(const ProfileKey&) const = default;

    static ProfileKey make(const std::string& command,
                           std::map<std::string, std::string> tags = {}) {
        return ProfileKey{normalize_command(command), std::move(tags)};
    }

    static ProfileKey of(const Profile& p) { return make(p.command, p.tags); }
};

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Directory name for a key: 16 hex digits over the normalized command and
// sorted tag pairs.
inline std::string key_hash(const ProfileKey& key) {
    std::string material = key.command;
    material += '\n';
    for (const auto& [k, v] : key.tags) {
        material += k;
        material += '=';
        material += v;
        material += '\n';
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(material)));
    return buf;
}

// ---------------------------------------------------------------------------
// JSON mapping
// ---------------------------------------------------------------------------

namespace detail {

using json = nlohmann::json;

inline json series_to_json(const std::vector<CpuSample>& xs) {
    json rows = json::array();
    for (const auto& s : xs)
        rows.push_back({s.t, s.instructions, s.cycles_used, s.cycles_stalled_frontend,
                        s.cycles_stalled_backend, s.flags});
    return {{"columns",
             {"t", "instructions", "cycles_used", "cycles_stalled_frontend",
              "cycles_stalled_backend", "flags"}},
            {"rows", rows}};
}

inline json series_to_json(const std::vector<MemSample>& xs) {
    json rows = json::array();
    for (const auto& s : xs)
        rows.push_back({s.t, s.rss, s.peak, s.allocated, s.freed, s.flags});
    return {{"columns", {"t", "rss", "peak", "allocated", "freed", "flags"}},
            {"rows", rows}};
}

inline json series_to_json(const std::vector<StorageSample>& xs) {
    json rows = json::array();
    for (const auto& s : xs) rows.push_back({s.t, s.bytes_read, s.bytes_written, s.flags});
    return {{"columns", {"t", "bytes_read", "bytes_written", "flags"}}, {"rows", rows}};
}

}  // namespace detail

inline nlohmann::json to_json(const Profile& p) {
    using nlohmann::json;
    json j;
    j["schema_version"] = p.schema_version;
    j["command"] = p.command;
    j["tags"] = p.tags;
    j["system"] = {{"core_count", p.system.core_count},
                   {"max_cpu_freq", p.system.max_cpu_freq},
                   {"total_memory", p.system.total_memory},
                   {"host_id", p.system.host_id},
                   {"os_id", p.system.os_id}};
    j["sample_period"] = p.sample_period;
    j["start_time"] = p.start_time;
    j["runtime"] = p.runtime;
    j["counter_source"] = to_string(p.counter_source);
    j["watchers"] = p.watchers;
    j["accounting"] = {{"exit_code", p.accounting.exit_code},
                       {"term_signal", p.accounting.term_signal},
                       {"user_time", p.accounting.user_time},
                       {"system_time", p.accounting.system_time},
                       {"peak_rss", p.accounting.peak_rss}};
    j["series"] = {{"cpu", detail::series_to_json(p.cpu_series)},
                   {"mem", detail::series_to_json(p.mem_series)},
                   {"storage", detail::series_to_json(p.storage_series)}};
    j["totals"] = {{"instructions", p.totals.instructions},
                   {"cycles_used", p.totals.cycles_used},
                   {"cycles_stalled_frontend", p.totals.cycles_stalled_frontend},
                   {"cycles_stalled_backend", p.totals.cycles_stalled_backend},
                   {"allocated", p.totals.allocated},
                   {"freed", p.totals.freed},
                   {"rss_max", p.totals.rss_max},
                   {"peak", p.totals.peak},
                   {"bytes_read", p.totals.bytes_read},
                   {"bytes_written", p.totals.bytes_written}};
    json d = {{"efficiency", p.derived.efficiency},
              {"efficiency_degenerate", p.derived.efficiency_degenerate},
              {"utilization", p.derived.utilization}};
    if (p.derived.flops) d["flops"] = *p.derived.flops;
    if (p.derived.flop_rate) d["flop_rate"] = *p.derived.flop_rate;
    j["derived"] = d;
    return j;
}

inline Profile profile_from_json(const nlohmann::json& j) {
    using nlohmann::json;
    try {
        int version = j.at("schema_version").get<int>();
        if (version > kProfileSchemaVersion)
            throw VersionError("profile schema_version " + std::to_string(version) +
                               " is newer than supported version " +
                               std::to_string(kProfileSchemaVersion));
        if (version < 1) throw StoreError("invalid schema_version");

        Profile p;
        p.schema_version = version;
        p.command = j.at("command").get<std::string>();
        p.tags = j.at("tags").get<std::map<std::string, std::string>>();
        const auto& sys = j.at("system");
        p.system.core_count = sys.at("core_count").get<int>();
        p.system.max_cpu_freq = sys.at("max_cpu_freq").get<std::uint64_t>();
        p.system.total_memory = sys.at("total_memory").get<bytes_t>();
        p.system.host_id = sys.at("host_id").get<std::string>();
        p.system.os_id = sys.at("os_id").get<std::string>();
        p.sample_period = j.at("sample_period").get<double>();
        p.start_time = j.at("start_time").get<double>();
        p.runtime = j.at("runtime").get<double>();
        p.counter_source = j.at("counter_source").get<std::string>() == "hardware"
                               ? CounterSource::hardware
                               : CounterSource::estimated;
        p.watchers = j.at("watchers").get<std::map<std::string, std::string>>();
        const auto& acc = j.at("accounting");
        p.accounting.exit_code = acc.at("exit_code").get<int>();
        p.accounting.term_signal = acc.at("term_signal").get<int>();
        p.accounting.user_time = acc.at("user_time").get<double>();
        p.accounting.system_time = acc.at("system_time").get<double>();
        p.accounting.peak_rss = acc.at("peak_rss").get<bytes_t>();

        const auto& series = j.at("series");
        for (const auto& r : series.at("cpu").at("rows")) {
            CpuSample s;
            s.t = r.at(0).get<double>();
            s.instructions = r.at(1).get<count_t>();
            s.cycles_used = r.at(2).get<count_t>();
            s.cycles_stalled_frontend = r.at(3).get<count_t>();
            s.cycles_stalled_backend = r.at(4).get<count_t>();
            s.flags = r.at(5).get<std::uint32_t>();
            p.cpu_series.push_back(s);
        }
        for (const auto& r : series.at("mem").at("rows")) {
            MemSample s;
            s.t = r.at(0).get<double>();
            s.rss = r.at(1).get<bytes_t>();
            s.peak = r.at(2).get<bytes_t>();
            s.allocated = r.at(3).get<bytes_t>();
            s.freed = r.at(4).get<bytes_t>();
            s.flags = r.at(5).get<std::uint32_t>();
            p.mem_series.push_back(s);
        }
        for (const auto& r : series.at("storage").at("rows")) {
            StorageSample s;
            s.t = r.at(0).get<double>();
            s.bytes_read = r.at(1).get<bytes_t>();
            s.bytes_written = r.at(2).get<bytes_t>();
            s.flags = r.at(3).get<std::uint32_t>();
            p.storage_series.push_back(s);
        }

        const auto& tot = j.at("totals");
        p.totals.instructions = tot.at("instructions").get<count_t>();
        p.totals.cycles_used = tot.at("cycles_used").get<count_t>();
        p.totals.cycles_stalled_frontend = tot.at("cycles_stalled_frontend").get<count_t>();
        p.totals.cycles_stalled_backend = tot.at("cycles_stalled_backend").get<count_t>();
        p.totals.allocated = tot.at("allocated").get<bytes_t>();
        p.totals.freed = tot.at("freed").get<bytes_t>();
        p.totals.rss_max = tot.at("rss_max").get<bytes_t>();
        p.totals.peak = tot.at("peak").get<bytes_t>();
        p.totals.bytes_read = tot.at("bytes_read").get<bytes_t>();
        p.totals.bytes_written = tot.at("bytes_written").get<bytes_t>();

        const auto& der = j.at("derived");
        p.derived.efficiency = der.at("efficiency").get<double>();
        p.derived.efficiency_degenerate = der.at("efficiency_degenerate").get<bool>();
        p.derived.utilization = der.at("utilization").get<double>();
        if (der.contains("flops")) p.derived.flops = der.at("flops").get<count_t>();
        if (der.contains("flop_rate")) p.derived.flop_rate = der.at("flop_rate").get<double>();
        return p;
    } catch (const StoreError&) {
        throw;
    } catch (const nlohmann::json::exception& e) {
        throw StoreError(std::string("malformed profile document: ") + e.what());
    }
}

// One profile per document. Header fields get one line each; series rows stay
// one row per line so the files diff cleanly.
inline std::string serialize_profile(const Profile& p) {
    nlohmann::json j = to_json(p);
    std::string out = "{\n";
    bool first_key = true;
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first_key) out += ",\n";
        first_key = false;
        out += " \"" + it.key() + "\": ";
        if (it.key() == "series") {
            out += "{\n";
            bool first_series = true;
            for (auto s = it.value().begin(); s != it.value().end(); ++s) {
                if (!first_series) out += ",\n";
                first_series = false;
                out += "  \"" + s.key() + "\": {\n";
                out += "   \"columns\": " + s.value()["columns"].dump() + ",\n";
                out += "   \"rows\": [";
                const auto& rows = s.value()["rows"];
                for (std::size_t i = 0; i < rows.size(); ++i) {
                    out += (i == 0) ? "\n    " : ",\n    ";
                    out += rows[i].dump();
                }
                out += rows.empty() ? "]\n" : "\n   ]\n";
                out += "  }";
            }
            out += "\n }";
        } else {
            out += it.value().dump();
        }
    }
    out += "\n}\n";
    return out;
}

inline Profile parse_profile(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw StoreError("profile parse error at byte " + std::to_string(e.byte) + ": " +
                         e.what());
    }
    return profile_from_json(j);
}

// ---------------------------------------------------------------------------
// File backend
// ---------------------------------------------------------------------------

struct StoredProfile {
    std::string id;
    Profile profile;
};

// Backend contract shared by the directory store and the remote document
// store; save is append-only, find matches keys exactly and returns newest
// first.
class StoreBackend {
public:
    virtual ~StoreBackend() = default;
    virtual std::string save(const Profile& p) = 0;
    virtual std::vector<StoredProfile> find(const ProfileKey& key) = 0;
    virtual Profile load(const std::string& id) = 0;
    virtual std::string describe() const = 0;
};

namespace detail {

namespace fs = std::filesystem;

class ScopedFlock {
public:
    explicit ScopedFlock(const fs::path& path) {
        fd_ = ::open(path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
        if (fd_ < 0)
            throw StoreError("cannot open lock file " + path.string() + ": " +
                             std::strerror(errno));
        if (::flock(fd_, LOCK_EX) != 0) {
            int err = errno;
            ::close(fd_);
            throw StoreError(std::string("cannot lock store: ") + std::strerror(err));
        }
    }
    ~ScopedFlock() {
        if (fd_ >= 0) ::close(fd_);  // closing releases the lock
    }
    ScopedFlock(const ScopedFlock&) = delete;
    ScopedFlock& operator=(const ScopedFlock&) = delete;

private:
    int fd_ = -1;
};

inline void write_file_atomic(const fs::path& target, const std::string& content) {
    fs::path tmp = target.parent_path() /
                   (".tmp." + std::to_string(::getpid()) + "." + target.filename().string());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw StoreError("cannot write " + tmp.string());
        out << content;
        out.flush();
        if (!out) {
            std::error_code ec;
            fs::remove(tmp, ec);
            throw StoreError("short write to " + tmp.string());
        }
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw StoreError("cannot rename into place: " + target.string());
    }
}

// Fixed-width "seconds.nanoseconds" stems sort lexically by age.
inline std::string timestamp_stem(std::chrono::system_clock::time_point tp) {
    using namespace std::chrono;
    auto ns = duration_cast<nanoseconds>(tp.time_since_epoch()).count();
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%010lld.%09lld",
                  static_cast<long long>(ns / 1'000'000'000),
                  static_cast<long long>(ns % 1'000'000'000));
    return buf;
}

}  // namespace detail

class FileStore : public StoreBackend {
public:
    explicit FileStore(std::string root) : root_(std::move(root)) {}

    std::string save(const Profile& p) override {
        namespace fs = std::filesystem;
        const ProfileKey key = ProfileKey::of(p);
        const fs::path dir = fs::path(root_) / key_hash(key);
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) throw StoreError("cannot create " + dir.string() + ": " + ec.message());

        detail::ScopedFlock lock(dir / ".lock");
        if (!fs::exists(dir / "key.json")) {
            nlohmann::json kj = {{"command", key.command}, {"tags", key.tags}};
            detail::write_file_atomic(dir / "key.json", kj.dump(1) + "\n");
        }
        auto now = std::chrono::system_clock::now();
        fs::path target;
        do {
            target = dir / (detail::timestamp_stem(now) + ".profile");
            now += std::chrono::nanoseconds(1);
        } while (fs::exists(target));
        detail::write_file_atomic(target, serialize_profile(p));
        return key_hash(key) + "/" + target.filename().string();
    }

    std::vector<StoredProfile> find(const ProfileKey& key) override {
        namespace fs = std::filesystem;
        const fs::path dir = fs::path(root_) / key_hash(key);
        std::vector<StoredProfile> out;
        std::error_code ec;
        if (!fs::is_directory(dir, ec)) return out;
        for (const auto& entry : fs::directory_iterator(dir, ec)) {
            if (entry.path().extension() != ".profile") continue;
            Profile p = load_path(entry.path());
            if (ProfileKey::of(p) == key)
                out.push_back({key_hash(key) + "/" + entry.path().filename().string(),
                               std::move(p)});
        }
        std::sort(out.begin(), out.end(),
                  [](const StoredProfile& a, const StoredProfile& b) { return a.id > b.id; });
        return out;
    }

    Profile load(const std::string& id) override {
        namespace fs = std::filesystem;
        fs::path path = fs::path(root_) / id;
        if (!fs::exists(path)) throw NotFoundError("no stored profile " + id);
        return load_path(path);
    }

    std::string describe() const override { return "file store at " + root_; }

    const std::string& root() const { return root_; }

private:
    static Profile load_path(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw StoreError("cannot read " + path.string());
        std::ostringstream ss;
        ss << in.rdbuf();
        try {
            return parse_profile(ss.str());
        } catch (VersionError&) {
            throw;
        } catch (StoreError& e) {
            throw StoreError(path.string() + ": " + e.what());
        }
    }

    std::string root_;
};

}  // namespace synmirror
