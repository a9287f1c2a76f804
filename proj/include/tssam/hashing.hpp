#pragma once

#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include <openssl/evp.h>

#include "tssam/errors.hpp"
#include "tssam/params.hpp"

namespace tssam {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw Error("sha256: init failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(const void* data, std::size_t n) {
    if (n && EVP_DigestUpdate(ctx_, data, n) != 1) throw Error("sha256: update failed");
    return *this;
  }
  Sha256& update(std::string_view s) { return update(s.data(), s.size()); }

  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_, md, &len) != 1) throw Error("sha256: final failed");
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) out += digits[md[i] >> 4], out += digits[md[i] & 15];
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

inline std::string sha256_hex(std::string_view bytes) { return Sha256().update(bytes).hex(); }

inline std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for hashing");
  Sha256 h;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), std::streamsize(buf.size()));
    h.update(buf.data(), std::size_t(in.gcount()));
  }
  return h.hex();
}

/// Digest over names, shapes and raw bytes of every entry whose name starts with `prefix`.
template <class T>
std::string hash_entries(const ParamStore<T>& store, std::string_view prefix = "") {
  Sha256 h;
  for (const auto& e : store.entries()) {
    if (e.name.compare(0, prefix.size(), prefix) != 0) continue;
    h.update(e.name).update("\n", 1);
    for (auto d : e.value.shape()) {
      const std::uint64_t v = d;
      h.update(&v, sizeof v);
    }
    h.update(e.value.data(), e.value.numel() * sizeof(T));
  }
  return h.hex();
}

}  // namespace tssam
