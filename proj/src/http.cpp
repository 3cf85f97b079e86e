#include "glotran/http.hpp"

#include <chrono>
#include <cstdlib>
#include <optional>
#include <regex>

#include "httplib.h"

namespace glotran::http {

namespace {

struct ParsedUrl {
  std::string scheme_host_port;
  std::string path;
};

ParsedUrl parse_url(const std::string& url) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw HttpError("malformed URL: " + url);
  return {m[1].str(), m[2].matched ? m[2].str() : std::string("/")};
}

}  // namespace

Response post(const std::string& url, const std::string& body, const std::string& content_type,
              const Headers& headers, double timeout_seconds) {
  const ParsedUrl parsed = parse_url(url);
  httplib::Client client(parsed.scheme_host_port);
  const auto timeout = std::chrono::duration<double>(timeout_seconds);
  const auto usec = std::chrono::duration_cast<std::chrono::microseconds>(timeout);
  client.set_connection_timeout(usec);
  client.set_read_timeout(usec);
  client.set_write_timeout(usec);

  httplib::Headers hdrs;
  for (const auto& [k, v] : headers) hdrs.emplace(k, v);

  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  std::optional<Clock::time_point> first_byte;
  std::string received;

  httplib::Request req;
  req.method = "POST";
  req.path = parsed.path;
  req.headers = hdrs;
  req.body = body;
  req.set_header("Content-Type", content_type);
  req.content_receiver = [&](const char* data, std::size_t len, std::uint64_t, std::uint64_t) {
    if (!first_byte) first_byte = Clock::now();
    received.append(data, len);
    return true;
  };
  httplib::Response res;
  httplib::Error err = httplib::Error::Success;
  if (!client.send(req, res, err)) {
    throw HttpError("POST " + url + " failed: " + httplib::to_string(err));
  }
  const auto end = Clock::now();
  if (res.status < 200 || res.status >= 300) {
    throw HttpError("POST " + url + " returned HTTP " + std::to_string(res.status), res.status);
  }
  Response out;
  out.status = res.status;
  out.body = received.empty() ? res.body : std::move(received);
  out.first_byte_seconds = std::chrono::duration<double>(first_byte.value_or(end) - start).count();
  out.total_seconds = std::chrono::duration<double>(end - start).count();
  return out;
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  static constexpr char kAlphabet[] =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out.push_back(kAlphabet[(v >> 18) & 63]);
    out.push_back(kAlphabet[(v >> 12) & 63]);
    out.push_back(kAlphabet[(v >> 6) & 63]);
    out.push_back(kAlphabet[v & 63]);
  }
  const std::size_t rest = bytes.size() - i;
  if (rest > 0) {
    std::uint32_t v = bytes[i] << 16;
    if (rest == 2) v |= bytes[i + 1] << 8;
    out.push_back(kAlphabet[(v >> 18) & 63]);
    out.push_back(kAlphabet[(v >> 12) & 63]);
    out.push_back(rest == 2 ? kAlphabet[(v >> 6) & 63] : '=');
    out.push_back('=');
  }
  return out;
}

std::string api_token_from_env() {
  const char* token = std::getenv("GLOTRAN_API_TOKEN");
  return token ? token : "";
}

}  // namespace glotran::http
