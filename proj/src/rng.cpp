#include "rill/rng.hpp"

#include <sstream>
#include <stdexcept>

namespace rill
{
    std::string Rng::save_state() const
    {
        std::ostringstream os;
        os << m_gen;
        return os.str();
    }

    void Rng::load_state(const std::string &s)
    {
        std::istringstream is(s);
        is >> m_gen;
        if (is.fail())
        {
            throw std::runtime_error("Rng::load_state: malformed state string");
        }
    }

    ZipfSampler::ZipfSampler(std::uint64_t n, double s) : m_n(n == 0 ? 1 : n), m_s(s)
    {
        if (m_s > 0.0)
        {
            m_h_x1 = h(1.5) - 1.0;
            m_h_n = h(static_cast<double>(m_n) + 0.5);
            m_threshold = 2.0 - h_inv(h(2.5) - std::pow(2.0, -m_s));
        }
    }

    // H(x) = integral of x^(-s); the s == 1 case uses log.
    double ZipfSampler::h(double x) const
    {
        if (m_s == 1.0)
        {
            return std::log(x);
        }
        return (std::pow(x, 1.0 - m_s) - 1.0) / (1.0 - m_s);
    }

    double ZipfSampler::h_inv(double x) const
    {
        if (m_s == 1.0)
        {
            return std::exp(x);
        }
        return std::pow(1.0 + x * (1.0 - m_s), 1.0 / (1.0 - m_s));
    }

    std::uint64_t ZipfSampler::sample(Rng &rng) const
    {
        if (m_s <= 0.0)
        {
            return 1 + rng.next_below(m_n);
        }
        while (true)
        {
            const double u = m_h_n + rng.next_unit() * (m_h_x1 - m_h_n);
            const double x = h_inv(u);
            std::uint64_t k = static_cast<std::uint64_t>(x + 0.5);
            if (k < 1)
            {
                k = 1;
            }
            else if (k > m_n)
            {
                k = m_n;
            }
            if (static_cast<double>(k) - x <= m_threshold)
            {
                return k;
            }
            if (u >= h(static_cast<double>(k) + 0.5) - std::pow(static_cast<double>(k), -m_s))
            {
                return k;
            }
        }
    }
}
