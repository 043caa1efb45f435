#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fpt/model.hpp"

namespace fpt {

/// Incremental SHA-256.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* data, std::size_t size);
    void update(std::string_view s) { update(s.data(), s.size()); }
    std::string hex();

private:
    struct State;
    std::unique_ptr<State> state_;
};

std::uint32_t crc32(const void* data, std::size_t size);

/// SHA-256 over (name, shape, raw float bytes) of each parameter, in order.
std::string hash_parameters(const std::vector<const Parameter*>& params);
std::string hash_parameters(const std::vector<Parameter*>& params);
std::string hash_tensor(const Tensor& t);

}  // namespace fpt
