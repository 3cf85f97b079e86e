#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace glotran::http {

class HttpError : public std::runtime_error {
 public:
  HttpError(const std::string& what, int status = 0) : std::runtime_error(what), status_(status) {}
  /// HTTP status, or 0 for transport failures (refused, timeout).
  int status() const { return status_; }

 private:
  int status_;
};

struct Response {
  int status = 0;
  std::string body;
  double first_byte_seconds = 0.0;  // request start to first body byte
  double total_seconds = 0.0;
};

using Headers = std::vector<std::pair<std::string, std::string>>;

/// POSTs `body` to an absolute http(s) URL. Throws HttpError on transport
/// failure or a non-2xx status.
Response post(const std::string& url, const std::string& body, const std::string& content_type,
              const Headers& headers = {}, double timeout_seconds = 30.0);

std::string base64_encode(std::span<const std::uint8_t> bytes);

/// Reads GLOTRAN_API_TOKEN; empty when unset.
std::string api_token_from_env();

}  // namespace glotran::http
