#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "treeflow/core_types.hpp"
#include "treeflow/errors.hpp"
#include "treeflow/policy.hpp"

namespace treeflow {

// Optional adapter that delegates next-token scoring to an external language
// model service. Wire contract:
//   POST <path> with JSON {"prompt": str, "candidates": [str, ...]}
//   200 response JSON {"logprobs": [float, ...]} aligned with candidates.
// Responses are renormalized over the candidate set and cached on disk keyed
// by a stable hash of (endpoint, prompt, candidates). Never used by training
// or the acceptance suite.
struct RemoteConfig {
  std::string host;       // e.g. "localhost"
  int port = 80;
  std::string path = "/logprobs";
  std::string auth_token;  // sent as a Bearer header when nonempty
  int max_retries = 3;
  int retry_backoff_ms = 50;
  int timeout_ms = 5000;
  std::string cache_file;  // empty = in-memory cache only

  // TREEFLOW_REMOTE_HOST / _PORT / _PATH / _TOKEN
  static RemoteConfig from_env() {
    RemoteConfig c;
    if (const char* h = std::getenv("TREEFLOW_REMOTE_HOST")) c.host = h;
    if (const char* p = std::getenv("TREEFLOW_REMOTE_PORT")) c.port = std::atoi(p);
    if (const char* p = std::getenv("TREEFLOW_REMOTE_PATH")) c.path = p;
    if (const char* t = std::getenv("TREEFLOW_REMOTE_TOKEN")) c.auth_token = t;
    return c;
  }
};

class RemotePolicy {
 public:
  explicit RemotePolicy(RemoteConfig config) : config_(std::move(config)) { load_cache(); }

  // Renormalized log-probabilities over the candidates. Cache hits make no
  // network call.
  std::vector<double> query(const std::string& prompt,
                            const std::vector<std::string>& candidates) {
    const std::string key = cache_key(prompt, candidates);
    {
      std::lock_guard<std::mutex> lock(mutex_);
      auto it = cache_.find(key);
      if (it != cache_.end()) return it->second;
    }
    std::vector<double> logprobs = fetch(prompt, candidates);
    renormalize(logprobs);
    {
      std::lock_guard<std::mutex> lock(mutex_);
      cache_.emplace(key, logprobs);
    }
    if (!config_.cache_file.empty()) save_cache();
    return logprobs;
  }

  // Renders the documented template for one expansion context:
  //   You are completing a causal rule chain over event types.
  //   Event types: <comma-separated names>
  //   Observed frequencies: <name=frac ...>        (when conditioned)
  //   Goal event: <label name | unknown>
  //   Rule so far ends at: <parent name> (depth <k>)
  //   Already chosen causes at this level: <names | none>
  //   Next cause, or STOP:
  std::string render_prompt(const Vocabulary& vocab, const PolicyContext& ctx) const {
    std::string p = "You are completing a causal rule chain over event types.\nEvent types: ";
    for (int i = 0; i < vocab.size(); ++i) {
      if (i) p += ", ";
      p += vocab.name(i);
    }
    if (ctx.condition && !ctx.condition->counts.empty()) {
      p += "\nObserved frequencies:";
      for (int i = 0; i < vocab.size(); ++i) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), " %s=%.3f", vocab.name(i).c_str(),
                      ctx.condition->counts[static_cast<std::size_t>(i)]);
        p += buf;
      }
      p += "\nGoal event: ";
      p += ctx.condition->label >= 0 ? vocab.name(ctx.condition->label) : "unknown";
    }
    p += "\nRule so far ends at: " + vocab.name(ctx.parent_pred) + " (depth " +
         std::to_string(ctx.depth) + ")";
    p += "\nAlready chosen causes at this level:";
    bool any = false;
    for (std::size_t z = 0; z < ctx.chosen.size(); ++z)
      if (ctx.chosen[z]) {
        p += any ? ", " : " ";
        p += vocab.name(static_cast<int>(z));
        any = true;
      }
    if (!any) p += " none";
    p += "\nNext cause, or STOP:";
    return p;
  }

  // Drop-in scoring of one context: unmasked predicate names plus the STOP
  // marker go out as candidates; the result comes back as a masked
  // TokenDistribution over Z united with stop.
  TokenDistribution next_token_dist(const Vocabulary& vocab, const PolicyParams& mask_source,
                                    const PolicyContext& ctx) {
    const TokenDistribution local = treeflow::next_token_dist(mask_source, ctx);
    std::vector<std::string> candidates;
    std::vector<std::size_t> tokens;
    for (std::size_t t = 0; t < local.masked.size(); ++t) {
      if (local.masked[t]) continue;
      tokens.push_back(t);
      candidates.push_back(t + 1 == local.masked.size() ? "STOP" : vocab.name(static_cast<int>(t)));
    }
    const std::vector<double> logprobs = query(render_prompt(vocab, ctx), candidates);
    TokenDistribution out;
    out.masked = local.masked;
    out.logp.assign(local.masked.size(), kNegInf);
    for (std::size_t i = 0; i < tokens.size(); ++i) out.logp[tokens[i]] = logprobs[i];
    return out;
  }

  std::size_t network_calls() const { return network_calls_; }

 private:
  static void renormalize(std::vector<double>& logprobs) {
    double m = kNegInf;
    for (double lp : logprobs) m = std::max(m, lp);
    double z = 0.0;
    for (double lp : logprobs) z += std::exp(lp - m);
    const double logz = m + std::log(z);
    for (double& lp : logprobs) lp -= logz;
  }

  std::vector<double> fetch(const std::string& prompt,
                            const std::vector<std::string>& candidates) {
    json body = {{"prompt", prompt}, {"candidates", candidates}};
    const std::string payload = body.dump();
    std::string last_error;
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
      if (attempt > 0)
        std::this_thread::sleep_for(
            std::chrono::milliseconds(config_.retry_backoff_ms * (1 << (attempt - 1))));
      httplib::Client client(config_.host, config_.port);
      client.set_connection_timeout(0, config_.timeout_ms * 1000);
      client.set_read_timeout(0, config_.timeout_ms * 1000);
      httplib::Headers headers;
      if (!config_.auth_token.empty())
        headers.emplace("Authorization", "Bearer " + config_.auth_token);
      ++network_calls_;
      auto res = client.Post(config_.path, headers, payload, "application/json");
      if (!res) {
        last_error = "transport failure (" + httplib::to_string(res.error()) + ")";
        continue;
      }
      if (res->status != 200) {
        last_error = "http status " + std::to_string(res->status);
        continue;
      }
      std::vector<double> logprobs;
      try {
        logprobs = json::parse(res->body).at("logprobs").get<std::vector<double>>();
      } catch (const json::exception& e) {
        throw TransportError(std::string("malformed reply: ") + e.what());
      }
      if (logprobs.size() != candidates.size())
        throw TransportError("candidate/logprob length mismatch: got " +
                             std::to_string(logprobs.size()) + ", expected " +
                             std::to_string(candidates.size()));
      for (double lp : logprobs)
        if (!std::isfinite(lp)) throw TransportError("non-finite logprob in reply");
      return logprobs;
    }
    throw TransportError("remote endpoint unreachable after " +
                         std::to_string(config_.max_retries + 1) + " attempts: " + last_error);
  }

  std::string cache_key(const std::string& prompt,
                        const std::vector<std::string>& candidates) const {
    std::uint64_t h = 1469598103934665603ULL;
    auto absorb = [&h](const std::string& s) {
      for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
      }
      h ^= 0x1f;
      h *= 1099511628211ULL;
    };
    absorb(config_.host + ":" + std::to_string(config_.port) + config_.path);
    absorb(prompt);
    for (const auto& c : candidates) absorb(c);
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  void load_cache() {
    if (config_.cache_file.empty()) return;
    std::ifstream in(config_.cache_file);
    if (!in) return;
    try {
      json j = json::parse(in);
      for (const auto& [key, v] : j.items()) cache_[key] = v.get<std::vector<double>>();
    } catch (const json::parse_error&) {
      cache_.clear();
    }
  }

  void save_cache() {
    std::lock_guard<std::mutex> lock(mutex_);
    json j = json::object();
    for (const auto& [key, v] : cache_) j[key] = v;
    std::ofstream out(config_.cache_file);
    out << j.dump() << "\n";
  }

  RemoteConfig config_;
  std::unordered_map<std::string, std::vector<double>> cache_;
  std::mutex mutex_;
  std::size_t network_calls_ = 0;
};

}  // namespace treeflow
