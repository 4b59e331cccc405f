#pragma once

// Minimal test harness: register cases with TEST_CASE, assert with CHECK /
// CHECK_CLOSE / CHECK_THROWS. main() runs everything and prints one line per
// case plus a summary; exit code is the failure count capped at 1.

#include <cmath>
#include <cstdio>
#include <exception>
#include <functional>
#include <string>
#include <vector>

namespace harness {

struct Case {
    std::string name;
    std::function<void()> fn;
};

inline std::vector<Case>& cases() {
    static std::vector<Case> v;
    return v;
}

inline int& failures() {
    static int n = 0;
    return n;
}

inline bool add(const std::string& name, std::function<void()> fn) {
    cases().push_back({name, std::move(fn)});
    return true;
}

struct AbortCase : std::exception {};

inline void fail(const char* file, int line, const std::string& what) {
    std::printf("  [FAIL] %s:%d: %s\n", file, line, what.c_str());
    ++failures();
}

inline int run_all() {
    int failed_cases = 0;
    for (auto& c : cases()) {
        int before = failures();
        try {
            c.fn();
        } catch (const AbortCase&) {
        } catch (const std::exception& e) {
            fail("<uncaught>", 0, std::string("exception: ") + e.what());
        }
        bool ok = failures() == before;
        std::printf("[%s] %s\n", ok ? " ok " : "FAIL", c.name.c_str());
        if (!ok) ++failed_cases;
    }
    std::printf("%zu cases, %d failed\n", cases().size(), failed_cases);
    return failed_cases == 0 ? 0 : 1;
}

}  // namespace harness

#define HARNESS_CAT2(a, b) a##b
#define HARNESS_CAT(a, b) HARNESS_CAT2(a, b)

#define TEST_CASE(name)                                                           \
    static void HARNESS_CAT(test_fn_, __LINE__)();                                \
    static bool HARNESS_CAT(test_reg_, __LINE__) =                                \
        harness::add(name, &HARNESS_CAT(test_fn_, __LINE__));                     \
    static void HARNESS_CAT(test_fn_, __LINE__)()

#define CHECK(cond)                                                               \
    do {                                                                          \
        if (!(cond)) harness::fail(__FILE__, __LINE__, #cond);                    \
    } while (0)

#define REQUIRE(cond)                                                             \
    do {                                                                          \
        if (!(cond)) {                                                            \
            harness::fail(__FILE__, __LINE__, #cond);                             \
            throw harness::AbortCase{};                                           \
        }                                                                         \
    } while (0)

#define CHECK_CLOSE(a, b, tol)                                                    \
    do {                                                                          \
        double va_ = static_cast<double>(a), vb_ = static_cast<double>(b);        \
        if (!(std::abs(va_ - vb_) <= (tol)))                                      \
            harness::fail(__FILE__, __LINE__,                                     \
                          std::string(#a " vs " #b ": ") + std::to_string(va_) +  \
                              " != " + std::to_string(vb_));                      \
    } while (0)

#define CHECK_THROWS(expr, ExType)                                                \
    do {                                                                          \
        bool caught_ = false;                                                     \
        try {                                                                     \
            (void)(expr);                                                         \
        } catch (const ExType&) {                                                 \
            caught_ = true;                                                       \
        } catch (...) {                                                           \
        }                                                                         \
        if (!caught_)                                                             \
            harness::fail(__FILE__, __LINE__, #expr " did not throw " #ExType);   \
    } while (0)

#define HARNESS_MAIN                                                              \
    int main() { return harness::run_all(); }
