#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <variant>

#include <json.hpp>

#include "rectflow/core.hpp"
#include "rectflow/errors.hpp"

namespace rectflow::geometry {

// Membership tolerance on all body inequalities (doubles near unit scale).
inline constexpr double kMembershipTol = 1e-12;

struct Box {
    Vec lo, hi;
};

struct Ball {
    Vec center;
    double radius = 0.0;
};

/// {x : A x <= b}. Boundedness and a nonempty interior are the caller's
/// responsibility; no LP check is performed.
struct Polytope {
    Mat A;
    Vec b;
};

/// Bounded convex body: box, ball, or halfspace polytope.
class ConvexBody {
  public:
    explicit ConvexBody(Box box) : v_(std::move(box)) {
        const auto& bx = std::get<Box>(v_);
        if (bx.lo.size() != bx.hi.size() || bx.lo.size() == 0)
            throw ParameterError("Box: bad dimensions");
        if (((bx.hi - bx.lo).array() <= 0.0).any())
            throw ParameterError("Box: need lo < hi coordinatewise");
    }
    explicit ConvexBody(Ball ball) : v_(std::move(ball)) {
        const auto& bl = std::get<Ball>(v_);
        if (bl.radius <= 0.0) throw ParameterError("Ball: radius must be positive");
        if (bl.center.size() == 0) throw ParameterError("Ball: empty center");
    }
    explicit ConvexBody(Polytope poly) : v_(std::move(poly)) {
        const auto& p = std::get<Polytope>(v_);
        if (p.A.rows() != p.b.size() || p.A.cols() == 0)
            throw ParameterError("Polytope: shape mismatch");
    }

    static ConvexBody box(Vec lo, Vec hi) { return ConvexBody(Box{std::move(lo), std::move(hi)}); }
    static ConvexBody ball(Vec center, double radius) {
        return ConvexBody(Ball{std::move(center), radius});
    }
    static ConvexBody polytope(Mat A, Vec b) {
        return ConvexBody(Polytope{std::move(A), std::move(b)});
    }
    static ConvexBody unit_interval() {
        Vec lo(1), hi(1);
        lo << 0.0;
        hi << 1.0;
        return box(lo, hi);
    }

    int dim() const {
        if (const auto* b = std::get_if<Box>(&v_)) return static_cast<int>(b->lo.size());
        if (const auto* b = std::get_if<Ball>(&v_)) return static_cast<int>(b->center.size());
        return static_cast<int>(std::get<Polytope>(v_).A.cols());
    }

    bool is_box() const { return std::holds_alternative<Box>(v_); }
    bool is_ball() const { return std::holds_alternative<Ball>(v_); }
    bool is_polytope() const { return std::holds_alternative<Polytope>(v_); }
    const Box& as_box() const { return std::get<Box>(v_); }
    const Ball& as_ball() const { return std::get<Ball>(v_); }
    const Polytope& as_polytope() const { return std::get<Polytope>(v_); }

  private:
    std::variant<Box, Ball, Polytope> v_;
};

inline bool contains(const ConvexBody& body, const Vec& x) {
    if (x.size() != body.dim()) throw ParameterError("contains: dimension mismatch");
    if (body.is_box()) {
        const auto& b = body.as_box();
        return ((x - b.lo).array() >= -kMembershipTol).all() &&
               ((b.hi - x).array() >= -kMembershipTol).all();
    }
    if (body.is_ball()) {
        const auto& b = body.as_ball();
        return (x - b.center).norm() <= b.radius + kMembershipTol;
    }
    const auto& p = body.as_polytope();
    return ((p.b - p.A * x).array() >= -kMembershipTol).all();
}

/// Distance from an interior point to the boundary. Exact for boxes and balls;
/// for polytopes the minimum margin min_i (b_i - a_i^T x)/||a_i||.
inline double dist_to_boundary(const ConvexBody& body, const Vec& x) {
    if (!contains(body, x)) throw DomainError("dist_to_boundary: point outside body");
    if (body.is_box()) {
        const auto& b = body.as_box();
        return std::max(0.0, std::min((x - b.lo).minCoeff(), (b.hi - x).minCoeff()));
    }
    if (body.is_ball()) {
        const auto& b = body.as_ball();
        return std::max(0.0, b.radius - (x - b.center).norm());
    }
    const auto& p = body.as_polytope();
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < p.b.size(); ++i) {
        const double margin = (p.b[i] - p.A.row(i).dot(x)) / p.A.row(i).norm();
        best = std::min(best, margin);
    }
    return std::max(0.0, best);
}

inline double diameter(const ConvexBody& body) {
    if (body.is_box()) {
        const auto& b = body.as_box();
        return (b.hi - b.lo).norm();
    }
    if (body.is_ball()) return 2.0 * body.as_ball().radius;
    throw DomainError("diameter: unavailable for polytopes");
}

/// Per-coordinate interval [a_tj, b_tj] of displacements delta with
/// z - t*delta and z + (1-t)*delta both inside a box body.
struct StInterval {
    Vec a, b;
};

inline StInterval st_interval_box(const ConvexBody& body, double t, const Vec& z) {
    if (!body.is_box()) throw ParameterError("st_interval_box: body must be a box");
    if (t <= 0.0 || t >= 1.0)
        throw DegenerateTimeError("st_interval_box: t must lie in (0,1)");
    if (!contains(body, z)) throw DomainError("st_interval_box: z outside body");
    const auto& bx = body.as_box();
    StInterval r;
    r.a = ((z - bx.hi) / t).cwiseMax((bx.lo - z) / (1.0 - t));
    r.b = ((z - bx.lo) / t).cwiseMin((bx.hi - z) / (1.0 - t));
    return r;
}

/// Exact membership of delta in S_t(z) = (z - Omega)/t  intersect  (Omega - z)/(1-t).
inline bool st_membership(const ConvexBody& body, double t, const Vec& z, const Vec& delta) {
    return contains(body, z - t * delta) && contains(body, z + (1.0 - t) * delta);
}

/// The displacement constraint set S_t(z) at a fixed (t, z), with the exact
/// per-coordinate intervals cached when the body is a box. Zero always belongs
/// to it (delta = 0 keeps both endpoints at z).
struct StSet {
    ConvexBody body;
    double t = 0.5;
    Vec z;
    std::optional<StInterval> cached_box_intervals;

    StSet(ConvexBody b, double t_, Vec z_)
        : body(std::move(b)), t(t_), z(std::move(z_)) {
        if (!contains(body, z)) throw DomainError("StSet: z outside body");
        if (body.is_box() && t > 0.0 && t < 1.0)
            cached_box_intervals = st_interval_box(body, t, z);
    }

    bool contains_displacement(const Vec& delta) const {
        if (cached_box_intervals)
            return ((delta - cached_box_intervals->a).array() >= -kMembershipTol).all() &&
                   ((cached_box_intervals->b - delta).array() >= -kMembershipTol).all();
        return st_membership(body, t, z, delta);
    }
};

/// Shrink the body by eps: each box side moves in by eps, the ball radius
/// drops by eps, polytope offsets become b_i - eps*||a_i||.
inline ConvexBody deflate(const ConvexBody& body, double eps) {
    if (eps < 0.0) throw ParameterError("deflate: eps must be >= 0");
    if (body.is_box()) {
        const auto& b = body.as_box();
        Vec lo = b.lo.array() + eps;
        Vec hi = b.hi.array() - eps;
        if (((hi - lo).array() <= 0.0).any())
            throw EmptyBodyError("deflate: box collapsed");
        return ConvexBody::box(std::move(lo), std::move(hi));
    }
    if (body.is_ball()) {
        const auto& b = body.as_ball();
        if (b.radius - eps <= 0.0) throw EmptyBodyError("deflate: ball collapsed");
        return ConvexBody::ball(b.center, b.radius - eps);
    }
    const auto& p = body.as_polytope();
    Vec b2 = p.b;
    for (Eigen::Index i = 0; i < b2.size(); ++i) b2[i] -= eps * p.A.row(i).norm();
    return ConvexBody::polytope(p.A, std::move(b2));
}

/// dist(y(t), boundary) >= (1 - t) * dist(x, boundary) along any flow path.
inline double flow_distance_lower_bound(double dist0, double t) {
    if (dist0 < 0.0 || t < 0.0 || t > 1.0)
        throw ParameterError("flow_distance_lower_bound: bad arguments");
    return (1.0 - t) * dist0;
}

/// Tight per-axis bounding box of the body itself.
inline StInterval bounding_box(const ConvexBody& body) {
    if (body.is_box()) {
        const auto& b = body.as_box();
        return {b.lo, b.hi};
    }
    if (body.is_ball()) {
        const auto& b = body.as_ball();
        return {b.center.array() - b.radius, b.center.array() + b.radius};
    }
    throw DomainError("bounding_box: unavailable for polytopes");
}

inline nlohmann::json to_json(const ConvexBody& body) {
    nlohmann::json j;
    auto vec = [](const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    if (body.is_box()) {
        j["type"] = "box";
        j["lo"] = vec(body.as_box().lo);
        j["hi"] = vec(body.as_box().hi);
    } else if (body.is_ball()) {
        j["type"] = "ball";
        j["center"] = vec(body.as_ball().center);
        j["radius"] = body.as_ball().radius;
    } else {
        const auto& p = body.as_polytope();
        j["type"] = "polytope";
        std::vector<std::vector<double>> rows;
        for (Eigen::Index i = 0; i < p.A.rows(); ++i) {
            rows.emplace_back(p.A.row(i).data(), p.A.row(i).data() + p.A.cols());
        }
        j["A"] = rows;
        j["b"] = vec(p.b);
    }
    return j;
}

inline ConvexBody body_from_json(const nlohmann::json& j) {
    auto vec = [](const nlohmann::json& a) {
        Vec v(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<Eigen::Index>(i)] = a[i];
        return v;
    };
    const std::string type = j.at("type");
    if (type == "box") return ConvexBody::box(vec(j.at("lo")), vec(j.at("hi")));
    if (type == "ball") return ConvexBody::ball(vec(j.at("center")), j.at("radius"));
    if (type == "polytope") {
        const auto& rows = j.at("A");
        Mat A(rows.size(), rows.at(0).size());
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t k = 0; k < rows[i].size(); ++k)
                A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
        return ConvexBody::polytope(std::move(A), vec(j.at("b")));
    }
    throw ParameterError("body_from_json: unknown type " + type);
}

}  // namespace rectflow::geometry
