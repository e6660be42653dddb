#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace rill
{
    // splitmix64, used to derive independent sub-seeds from a run seed.
    inline std::uint64_t splitmix64(std::uint64_t &state) noexcept
    {
        std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept
    {
        std::uint64_t s = seed ^ (0xa076bc9b05104f2dULL * (stream + 1));
        return splitmix64(s);
    }

    // mt19937_64 output is fully specified by the standard, so runs are
    // reproducible across platforms; the mappings below avoid unspecified
    // distribution implementations for the same reason.
    class Rng
    {
    public:
        explicit Rng(std::uint64_t seed = 1) : m_gen(seed) {}

        std::uint64_t next_u64() { return m_gen(); }

        // Uniform in [0, n) without modulo bias.
        std::uint64_t next_below(std::uint64_t n)
        {
            if (n <= 1)
            {
                return 0;
            }
            const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
            std::uint64_t v = m_gen();
            while (v >= limit)
            {
                v = m_gen();
            }
            return v % n;
        }

        // Uniform in [0, 1).
        double next_unit()
        {
            return static_cast<double>(m_gen() >> 11) * 0x1.0p-53;
        }

        std::string save_state() const;
        void load_state(const std::string &s);

    private:
        std::mt19937_64 m_gen;
    };

    // Zipf(s) over ranks {1..n} via rejection inversion; s = 0 degenerates to
    // uniform. Deterministic given the Rng state.
    class ZipfSampler
    {
    public:
        ZipfSampler(std::uint64_t n, double s);

        std::uint64_t sample(Rng &rng) const;

        std::uint64_t n() const noexcept { return m_n; }
        double s() const noexcept { return m_s; }

    private:
        double h(double x) const;
        double h_inv(double x) const;

        std::uint64_t m_n;
        double m_s;
        double m_h_x1 = 0.0;
        double m_h_n = 0.0;
        double m_threshold = 0.0;
    };
}
