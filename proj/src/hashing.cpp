#include "fpt/hashing.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <fmt/format.h>

#include "fpt/errors.hpp"

namespace fpt {

struct Sha256::State {
    EVP_MD_CTX* ctx = nullptr;
};

Sha256::Sha256() : state_(std::make_unique<State>()) {
    state_->ctx = EVP_MD_CTX_new();
    if (state_->ctx == nullptr || EVP_DigestInit_ex(state_->ctx, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 initialisation failed");
    }
}

Sha256::~Sha256() { EVP_MD_CTX_free(state_->ctx); }

void Sha256::update(const void* data, std::size_t size) { EVP_DigestUpdate(state_->ctx, data, size); }

std::string Sha256::hex() {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(state_->ctx, digest, &len);
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += fmt::format("{:02x}", digest[i]);
    }
    return out;
}

std::uint32_t crc32(const void* data, std::size_t size) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    const auto* bytes = static_cast<const Bytef*>(data);
    // zlib takes uInt lengths; feed large buffers in chunks.
    while (size > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
        crc = ::crc32(crc, bytes, chunk);
        bytes += chunk;
        size -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

namespace {
void absorb(Sha256& h, const std::string& name, const Tensor& t) {
    h.update(name);
    h.update(shape_str(t.shape()));
    const auto d = t.data();
    h.update(d.data(), d.size_bytes());
}
}  // namespace

std::string hash_parameters(const std::vector<const Parameter*>& params) {
    Sha256 h;
    for (const auto* p : params) {
        absorb(h, p->name, p->tensor);
    }
    return h.hex();
}

std::string hash_parameters(const std::vector<Parameter*>& params) {
    return hash_parameters(std::vector<const Parameter*>(params.begin(), params.end()));
}

std::string hash_tensor(const Tensor& t) {
    Sha256 h;
    absorb(h, "", t);
    return h.hex();
}

}  // namespace fpt
