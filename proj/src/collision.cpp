#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "surgsim/physics.hpp"

namespace surgsim::phys {

namespace {

struct WPlane {
    Vec3 n;
    double d;
};
struct WBox {
    Vec3 c;
    Mat3 r;
    Vec3 h;
};
struct WCapsule {
    Vec3 a;
    Vec3 b;
    double r;
};
using WShape = std::variant<WPlane, WBox, WCapsule>;

WCapsule cylinder_as_capsule(const CylinderShape& c, const Pose& pose) {
    const double half = std::max(0.5 * c.height - c.radius, 0.0);
    const Pose p = pose * c.local;
    return {p * Vec3(0, 0, -half), p * Vec3(0, 0, half), c.radius};
}

WShape to_world(const Shape& s, const Pose& pose) {
    return std::visit(
        [&](const auto& sh) -> WShape {
            using T = std::decay_t<decltype(sh)>;
            if constexpr (std::is_same_v<T, PlaneShape>) {
                const Vec3 n = pose.rotation * sh.normal;
                return WPlane{n, sh.offset + n.dot(pose.translation)};
            } else if constexpr (std::is_same_v<T, BoxShape>) {
                const Pose p = pose * sh.local;
                return WBox{p.translation, p.rotation, sh.half_extents};
            } else if constexpr (std::is_same_v<T, CapsuleShape>) {
                return WCapsule{pose * sh.a, pose * sh.b, sh.radius};
            } else {
                return cylinder_as_capsule(sh, pose);
            }
        },
        s);
}

void flip(std::vector<ContactPoint>& cs) {
    for (auto& c : cs) c.normal = -c.normal;
}

// Closest points between segments p1-q1 and p2-q2.
void closest_segments(const Vec3& p1, const Vec3& q1, const Vec3& p2, const Vec3& q2, Vec3& c1, Vec3& c2) {
    const Vec3 d1 = q1 - p1, d2 = q2 - p2, r = p1 - p2;
    const double a = d1.squaredNorm(), e = d2.squaredNorm(), f = d2.dot(r);
    double s = 0, t = 0;
    constexpr double eps = 1e-18;
    if (a <= eps && e <= eps) {
        c1 = p1;
        c2 = p2;
        return;
    }
    if (a <= eps) {
        t = std::clamp(f / e, 0.0, 1.0);
    } else {
        const double c = d1.dot(r);
        if (e <= eps) {
            s = std::clamp(-c / a, 0.0, 1.0);
        } else {
            const double b = d1.dot(d2);
            const double denom = a * e - b * b;
            s = denom > eps ? std::clamp((b * f - c * e) / denom, 0.0, 1.0) : 0.0;
            t = (b * s + f) / e;
            if (t < 0) {
                t = 0;
                s = std::clamp(-c / a, 0.0, 1.0);
            } else if (t > 1) {
                t = 1;
                s = std::clamp((b - c) / a, 0.0, 1.0);
            }
        }
    }
    c1 = p1 + d1 * s;
    c2 = p2 + d2 * t;
}

double box_sdf_local(const Vec3& p, const Vec3& h) {
    const Vec3 q = p.cwiseAbs() - h;
    return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
}

// Outward normal of the box surface nearest to a local point.
Vec3 box_normal_local(const Vec3& p, const Vec3& h) {
    const Vec3 q = p.cwiseAbs() - h;
    if (q.maxCoeff() > 0) {
        const Vec3 closest = p.cwiseMax(-h).cwiseMin(h);
        const Vec3 d = p - closest;
        const double n = d.norm();
        if (n > 1e-15) return d / n;
    }
    int k = 0;
    q.maxCoeff(&k);
    Vec3 n = Vec3::Zero();
    n[k] = p[k] >= 0 ? 1.0 : -1.0;
    return n;
}

std::vector<ContactPoint> plane_box(const WPlane& pl, const WBox& b, double margin) {
    std::vector<ContactPoint> out;
    for (int i = 0; i < 8; ++i) {
        const Vec3 local((i & 1 ? 1 : -1) * b.h.x(), (i & 2 ? 1 : -1) * b.h.y(), (i & 4 ? 1 : -1) * b.h.z());
        const Vec3 v = b.c + b.r * local;
        const double sep = pl.n.dot(v) - pl.d;
        if (sep <= margin) out.push_back({-1, -1, v - pl.n * (0.5 * sep), pl.n, -sep});
    }
    return out;
}

std::vector<ContactPoint> plane_capsule(const WPlane& pl, const WCapsule& c, double margin) {
    std::vector<ContactPoint> out;
    const bool single = (c.a - c.b).squaredNorm() < 1e-24;
    for (const Vec3& p : {c.a, c.b}) {
        const double sep = pl.n.dot(p) - pl.d - c.r;
        if (sep <= margin) out.push_back({-1, -1, p - pl.n * (c.r + 0.5 * sep), pl.n, -sep});
        if (single) break;
    }
    return out;
}

std::vector<ContactPoint> capsule_capsule(const WCapsule& x, const WCapsule& y, double margin) {
    Vec3 c1, c2;
    closest_segments(x.a, x.b, y.a, y.b, c1, c2);
    Vec3 d = c2 - c1;
    const double dist = d.norm();
    const double sep = dist - x.r - y.r;
    if (sep > margin) return {};
    Vec3 n;
    if (dist > 1e-12) {
        n = d / dist;
    } else {
        const Vec3 axis = (x.b - x.a).squaredNorm() > 1e-24 ? Vec3(x.b - x.a) : Vec3::UnitX();
        n = axis.unitOrthogonal();
    }
    return {{-1, -1, c1 + n * (x.r + 0.5 * sep), n, -sep}};
}

std::vector<ContactPoint> box_capsule(const WBox& b, const WCapsule& c, double margin) {
    const Mat3 rt = b.r.transpose();
    const Vec3 pa = rt * (c.a - b.c), pb = rt * (c.b - b.c);
    auto sdf_at = [&](double t) { return box_sdf_local(pa + (pb - pa) * t, b.h); };

    std::vector<double> candidates{0.0};
    const bool single = (pa - pb).squaredNorm() < 1e-24;
    if (!single) {
        candidates.push_back(1.0);
        double lo = 0, hi = 1;
        for (int it = 0; it < 48; ++it) {
            const double m1 = lo + (hi - lo) / 3, m2 = hi - (hi - lo) / 3;
            if (sdf_at(m1) < sdf_at(m2)) hi = m2;
            else lo = m1;
        }
        const double ts = 0.5 * (lo + hi);
        if (sdf_at(ts) < std::min(sdf_at(0.0), sdf_at(1.0)) - 1e-9) candidates.push_back(ts);
    }
    std::vector<ContactPoint> out;
    for (double t : candidates) {
        const Vec3 p = pa + (pb - pa) * t;
        const double sdf = box_sdf_local(p, b.h);
        const double sep = sdf - c.r;
        if (sep > margin) continue;
        const Vec3 nl = box_normal_local(p, b.h);
        const Vec3 n = b.r * nl;
        const Vec3 pw = b.c + b.r * p;
        out.push_back({-1, -1, pw - n * (c.r + 0.5 * sep), n, -sep});
    }
    return out;
}

std::vector<ContactPoint> box_box(const WBox& A, const WBox& B, double margin) {
    const Vec3 d = B.c - A.c;
    double best_score = std::numeric_limits<double>::infinity();
    double best_overlap = 0;
    int best_axis = -1;
    Vec3 best_n = Vec3::UnitZ();

    auto test = [&](Vec3 L, int id, double bias) {
        const double len = L.norm();
        if (len < 1e-9) return true;
        L /= len;
        double ra = 0, rb = 0;
        for (int k = 0; k < 3; ++k) {
            ra += A.h[k] * std::abs(A.r.col(k).dot(L));
            rb += B.h[k] * std::abs(B.r.col(k).dot(L));
        }
        const double dist = d.dot(L);
        const double overlap = ra + rb - std::abs(dist);
        if (overlap < -margin) return false;
        const double score = overlap * bias + (bias > 1 ? 1e-6 : 0.0);
        if (score < best_score) {
            best_score = score;
            best_overlap = overlap;
            best_axis = id;
            best_n = dist < 0 ? Vec3(-L) : L;
        }
        return true;
    };
    for (int i = 0; i < 3; ++i)
        if (!test(A.r.col(i), i, 1.0)) return {};
    for (int j = 0; j < 3; ++j)
        if (!test(B.r.col(j), 3 + j, 1.0)) return {};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            if (!test(A.r.col(i).cross(B.r.col(j)), 6 + 3 * i + j, 1.05)) return {};
    if (best_axis < 0) return {};

    std::vector<ContactPoint> out;
    if (best_axis < 6) {
        const bool ref_is_a = best_axis < 3;
        const WBox& ref = ref_is_a ? A : B;
        const WBox& inc = ref_is_a ? B : A;
        const int i = best_axis % 3;
        const Vec3 fn = ref_is_a ? best_n : Vec3(-best_n);
        const Vec3 fc = ref.c + fn * ref.h[i];
        const int i1 = (i + 1) % 3, i2 = (i + 2) % 3;
        const Vec3 u1 = ref.r.col(i1), u2 = ref.r.col(i2);
        const double e1 = ref.h[i1], e2 = ref.h[i2];

        int j = 0;
        double best_dot = -1;
        for (int k = 0; k < 3; ++k) {
            const double v = std::abs(inc.r.col(k).dot(fn));
            if (v > best_dot) {
                best_dot = v;
                j = k;
            }
        }
        const double sgn = inc.r.col(j).dot(fn) > 0 ? -1.0 : 1.0;
        const Vec3 ic = inc.c + sgn * inc.r.col(j) * inc.h[j];
        const int j1 = (j + 1) % 3, j2 = (j + 2) % 3;
        const Vec3 a1 = inc.r.col(j1) * inc.h[j1], a2 = inc.r.col(j2) * inc.h[j2];
        std::vector<Vec3> poly{ic + a1 + a2, ic - a1 + a2, ic - a1 - a2, ic + a1 - a2};

        auto clip = [](const std::vector<Vec3>& in, const Vec3& n, double off) {
            std::vector<Vec3> res;
            const size_t m = in.size();
            for (size_t k = 0; k < m; ++k) {
                const Vec3& p = in[k];
                const Vec3& q = in[(k + 1) % m];
                const double dp = n.dot(p) - off, dq = n.dot(q) - off;
                if (dp <= 0) res.push_back(p);
                if ((dp < 0 && dq > 0) || (dp > 0 && dq < 0)) res.push_back(p + (q - p) * (dp / (dp - dq)));
            }
            return res;
        };
        poly = clip(poly, u1, u1.dot(fc) + e1);
        poly = clip(poly, -u1, -u1.dot(fc) + e1);
        poly = clip(poly, u2, u2.dot(fc) + e2);
        poly = clip(poly, -u2, -u2.dot(fc) + e2);
        for (const Vec3& p : poly) {
            const double sep = fn.dot(p - fc);
            if (sep <= margin) out.push_back({-1, -1, p - fn * (0.5 * sep), best_n, -sep});
        }
    } else {
        const int i = (best_axis - 6) / 3, j = (best_axis - 6) % 3;
        Vec3 pa = A.c, pb = B.c;
        for (int k = 0; k < 3; ++k) {
            if (k != i) pa += (A.r.col(k).dot(best_n) > 0 ? 1.0 : -1.0) * A.h[k] * A.r.col(k);
            if (k != j) pb += (B.r.col(k).dot(best_n) > 0 ? -1.0 : 1.0) * B.h[k] * B.r.col(k);
        }
        Vec3 c1, c2;
        closest_segments(pa - A.r.col(i) * A.h[i], pa + A.r.col(i) * A.h[i], pb - B.r.col(j) * B.h[j],
                         pb + B.r.col(j) * B.h[j], c1, c2);
        out.push_back({-1, -1, 0.5 * (c1 + c2), best_n, best_overlap});
    }
    return out;
}

} // namespace

std::vector<ContactPoint> collide_shapes(const Shape& a, const Pose& pose_a, const Shape& b, const Pose& pose_b,
                                         double margin) {
    const WShape wa = to_world(a, pose_a);
    const WShape wb = to_world(b, pose_b);
    return std::visit(
        [&](const auto& x, const auto& y) -> std::vector<ContactPoint> {
            using X = std::decay_t<decltype(x)>;
            using Y = std::decay_t<decltype(y)>;
            if constexpr (std::is_same_v<X, WPlane> && std::is_same_v<Y, WPlane>) {
                throw ContractViolation("collide_shapes: plane-plane pairs are unsupported");
            } else if constexpr (std::is_same_v<X, WPlane> && std::is_same_v<Y, WBox>) {
                return plane_box(x, y, margin);
            } else if constexpr (std::is_same_v<X, WPlane> && std::is_same_v<Y, WCapsule>) {
                return plane_capsule(x, y, margin);
            } else if constexpr (std::is_same_v<X, WBox> && std::is_same_v<Y, WPlane>) {
                auto cs = plane_box(y, x, margin);
                flip(cs);
                return cs;
            } else if constexpr (std::is_same_v<X, WBox> && std::is_same_v<Y, WBox>) {
                return box_box(x, y, margin);
            } else if constexpr (std::is_same_v<X, WBox> && std::is_same_v<Y, WCapsule>) {
                return box_capsule(x, y, margin);
            } else if constexpr (std::is_same_v<X, WCapsule> && std::is_same_v<Y, WPlane>) {
                auto cs = plane_capsule(y, x, margin);
                flip(cs);
                return cs;
            } else if constexpr (std::is_same_v<X, WCapsule> && std::is_same_v<Y, WBox>) {
                auto cs = box_capsule(y, x, margin);
                flip(cs);
                return cs;
            } else {
                return capsule_capsule(x, y, margin);
            }
        },
        wa, wb);
}

double distance_to_body(const RigidBody& body, const Vec3& point) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& part : body.collider.parts) {
        const WShape w = to_world(part, body.pose);
        const double d = std::visit(
            [&](const auto& s) -> double {
                using T = std::decay_t<decltype(s)>;
                if constexpr (std::is_same_v<T, WPlane>) {
                    return s.n.dot(point) - s.d;
                } else if constexpr (std::is_same_v<T, WBox>) {
                    return box_sdf_local(s.r.transpose() * (point - s.c), s.h);
                } else {
                    Vec3 c1, c2;
                    closest_segments(s.a, s.b, point, point, c1, c2);
                    return (point - c1).norm() - s.r;
                }
            },
            w);
        best = std::min(best, d);
    }
    return best;
}

double lowest_point(const RigidBody& body) {
    double low = std::numeric_limits<double>::infinity();
    for (const auto& part : body.collider.parts) {
        const WShape w = to_world(part, body.pose);
        std::visit(
            [&](const auto& s) {
                using T = std::decay_t<decltype(s)>;
                if constexpr (std::is_same_v<T, WPlane>) {
                    low = -std::numeric_limits<double>::infinity();
                } else if constexpr (std::is_same_v<T, WBox>) {
                    double ext = 0;
                    for (int k = 0; k < 3; ++k) ext += std::abs(s.r(2, k)) * s.h[k];
                    low = std::min(low, s.c.z() - ext);
                } else {
                    low = std::min(low, std::min(s.a.z(), s.b.z()) - s.r);
                }
            },
            w);
    }
    return low;
}

} // namespace surgsim::phys
