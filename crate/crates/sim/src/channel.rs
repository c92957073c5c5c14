//! Static uplink channel draw per user: pathloss uniform over the cell's
//! configured range plus lognormal shadowing, fractional power control.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use ulsched_core::channel_power::UeLink;

use crate::config::{CellConfig, PowerConfig, RB_HZ};

/// Physical state of one uplink, fixed for a run.
#[derive(Debug, Clone, Copy)]
pub struct UeChannel {
    pub pathloss_db: f64,
    pub link: UeLink,
}

fn dbm_to_w(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Draw one user's channel and build its link parameters.
pub fn draw_channel<R: Rng>(cell: &CellConfig, power: &PowerConfig, rng: &mut R) -> UeChannel {
    let base = if cell.pathloss_max_db > cell.pathloss_min_db {
        rng.gen_range(cell.pathloss_min_db..cell.pathloss_max_db)
    } else {
        cell.pathloss_min_db
    };
    let shadow = Normal::new(0.0, cell.shadowing_sigma_db)
        .expect("validated sigma")
        .sample(rng);
    let pathloss_db = base + shadow;
    let gain = 10f64.powf(-pathloss_db / 10.0);
    // Fractional power control sets the transmit PSD per resource block.
    let tx_dbm_per_rb = power.p0_dbm_per_rb + power.alpha * pathloss_db;
    let psd_cap = dbm_to_w(tx_dbm_per_rb) / RB_HZ;
    let interference_psd =
        dbm_to_w(cell.noise_dbm_hz + cell.interference_over_thermal_db);
    UeChannel {
        pathloss_db,
        link: UeLink::new(gain, psd_cap, power.peak_power_w, interference_psd)
            .expect("positive channel parameters"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use ulsched_core::channel_power::{rate, Shannon};

    #[test]
    fn drawn_links_give_sane_lte_rates() {
        let cell = CellConfig::default();
        let power = PowerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let psi = Shannon;
        for _ in 0..200 {
            let ch = draw_channel(&cell, &power, &mut rng);
            let r10 = rate(&ch.link, &psi, 10.0 * RB_HZ).unwrap();
            // 10 RBs should carry somewhere between dial-up and fiber.
            assert!(r10 > 1e4, "rate {r10} absurdly low at {:?}", ch);
            assert!(r10 < 3e8, "rate {r10} absurdly high at {:?}", ch);
        }
    }

    #[test]
    fn pathloss_stays_in_range_without_shadowing() {
        let mut cell = CellConfig::default();
        cell.shadowing_sigma_db = 0.0;
        let power = PowerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let ch = draw_channel(&cell, &power, &mut rng);
            assert!(ch.pathloss_db >= cell.pathloss_min_db);
            assert!(ch.pathloss_db < cell.pathloss_max_db);
        }
    }

    #[test]
    fn weaker_links_hit_the_power_kink_sooner() {
        let mut cell = CellConfig::default();
        cell.shadowing_sigma_db = 0.0;
        let power = PowerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // With alpha < 1 the transmit PSD rises with pathloss, so the peak
        // power limits far users to fewer resource blocks.
        let mut kinks: Vec<(f64, f64)> = (0..50)
            .map(|_| {
                let ch = draw_channel(&cell, &power, &mut rng);
                (ch.pathloss_db, ch.link.power_limit_bw())
            })
            .collect();
        kinks.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert!(kinks.first().unwrap().1 > kinks.last().unwrap().1);
        // An edge user is power limited within the cell's band; a strong
        // user is not.
        let band = cell.n_rbs as f64 * RB_HZ;
        assert!(kinks.last().unwrap().1 < band);
        assert!(kinks.first().unwrap().1 > band / 4.0);
    }
}
