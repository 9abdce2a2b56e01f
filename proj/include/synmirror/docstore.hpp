#pragma once

// Remote document backend: profiles live one-per-document behind a small
// HTTP JSON API. Documents are size-capped, so limits are enforced here on
// the client before anything touches the wire.
//
//   POST /profiles            body: profile JSON     -> {"id": "..."}
//   GET  /profiles/<id>                              -> profile JSON | 404
//   GET  /profiles?command=..&tags=..                -> [{"id","profile"},...]

#include <memory>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "synmirror/errors.hpp"
#include "synmirror/store.hpp"

namespace synmirror {

namespace detail {

inline std::string url_encode(const std::string& s) {
    static const char* hex = "0123456789ABCDEF";
    std::string out;
    for (unsigned char c : s) {
        if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
            out += static_cast<char>(c);
        } else {
            out += '%';
            out += hex[c >> 4];
            out += hex[c & 15];
        }
    }
    return out;
}

}  // namespace detail

class DocumentStore : public StoreBackend {
public:
    explicit DocumentStore(std::string url) : base_(std::move(url)) {
        while (!base_.empty() && base_.back() == '/') base_.pop_back();
    }

    std::string save(const Profile& p) override {
        if (p.total_samples() > kDocSampleLimit)
            throw SizeLimitError(
                "profile has " + std::to_string(p.total_samples()) +
                " samples; a single document is capped at 16 MiB, about " +
                std::to_string(kDocSampleLimit) +
                " samples; use a file store for profiles this large");
        std::string body = serialize_profile(p);
        if (body.size() > kDocByteLimit)
            throw SizeLimitError("serialized profile is " + std::to_string(body.size()) +
                                 " bytes; a single document is capped at " +
                                 std::to_string(kDocByteLimit) +
                                 " bytes; use a file store for profiles this large");

        httplib::Client cli(base_);
        auto res = cli.Post("/profiles", body, "application/json");
        if (!res) throw StoreError("document store unreachable at " + base_);
        if (res->status != 200)
            throw StoreError("document store rejected save: HTTP " +
                             std::to_string(res->status));
        try {
            return nlohmann::json::parse(res->body).at("id").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw StoreError(std::string("bad save response: ") + e.what());
        }
    }

    std::vector<StoredProfile> find(const ProfileKey& key) override {
        nlohmann::json tags = key.tags;
        std::string path = "/profiles?command=" + detail::url_encode(key.command) +
                           "&tags=" + detail::url_encode(tags.dump());
        httplib::Client cli(base_);
        auto res = cli.Get(path);
        if (!res) throw StoreError("document store unreachable at " + base_);
        if (res->status != 200)
            throw StoreError("document store find failed: HTTP " +
                             std::to_string(res->status));
        std::vector<StoredProfile> out;
        try {
            for (const auto& row : nlohmann::json::parse(res->body)) {
                out.push_back({row.at("id").get<std::string>(),
                               profile_from_json(row.at("profile"))});
            }
        } catch (const nlohmann::json::exception& e) {
            throw StoreError(std::string("bad find response: ") + e.what());
        }
        return out;
    }

    Profile load(const std::string& id) override {
        httplib::Client cli(base_);
        auto res = cli.Get("/profiles/" + detail::url_encode(id));
        if (!res) throw StoreError("document store unreachable at " + base_);
        if (res->status == 404) throw NotFoundError("no stored profile " + id);
        if (res->status != 200)
            throw StoreError("document store load failed: HTTP " +
                             std::to_string(res->status));
        return parse_profile(res->body);
    }

    std::string describe() const override { return "document store at " + base_; }

private:
    std::string base_;
};

// Location syntax: an http(s) URL selects the document backend, anything
// else is a directory for the file backend.
inline std::unique_ptr<StoreBackend> open_store(const std::string& location) {
    if (location.rfind("http://", 0) == 0 || location.rfind("https://", 0) == 0)
        return std::make_unique<DocumentStore>(location);
    return std::make_unique<FileStore>(location);
}

}  // namespace synmirror
