#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "metapix/common.hpp"

namespace metapix {

// N-dimensional numeric array. Values are shared (copies are cheap views);
// `node`/`tape_id` link the tensor into the graph that recorded it. A tensor
// with no node link never receives a gradient.
template <class Real>
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<Real>> values;
    bool requires_grad = false;
    int node = -1;
    std::uint64_t tape_id = 0;

    Tensor() = default;

    Tensor(Shape s, std::shared_ptr<std::vector<Real>> v) : shape(std::move(s)), values(std::move(v)) {}

    static Tensor zeros(const Shape& s) {
        return Tensor(s, std::make_shared<std::vector<Real>>(numel(s), Real(0)));
    }

    static Tensor full(const Shape& s, Real v) {
        return Tensor(s, std::make_shared<std::vector<Real>>(numel(s), v));
    }

    static Tensor from(const Shape& s, std::vector<Real> v) {
        require(long(v.size()) == numel(s), "tensor init: value count does not match shape " + shape_str(s));
        return Tensor(s, std::make_shared<std::vector<Real>>(std::move(v)));
    }

    long size() const { return values ? long(values->size()) : 0; }
    Real* data() { return values->data(); }
    const Real* data() const { return values->data(); }
    Real item() const {
        require(size() == 1, "item() on non-scalar tensor " + shape_str(shape));
        return (*values)[0];
    }

    // Same values, no grad linkage.
    Tensor detached() const {
        Tensor t;
        t.shape = shape;
        t.values = values;
        return t;
    }

    // Deep copy of the values (fresh storage).
    Tensor clone() const {
        Tensor t;
        t.shape = shape;
        t.values = std::make_shared<std::vector<Real>>(*values);
        t.requires_grad = requires_grad;
        return t;
    }

    bool all_finite() const {
        for (Real v : *values)
            if (!std::isfinite(double(v))) return false;
        return true;
    }
};

// Plain integer map (labels, masks). Not part of the differentiable graph.
struct IntMap {
    Shape shape;
    std::vector<std::int32_t> v;

    static IntMap zeros(const Shape& s) { return IntMap{s, std::vector<std::int32_t>(numel(s), 0)}; }
    long size() const { return long(v.size()); }
};

}  // namespace metapix
