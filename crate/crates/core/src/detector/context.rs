//! Bus-wide evidence: per-frame contention, load over time, flood episodes,
//! learned periods and per-identifier rate anomalies.

use std::collections::{BTreeMap, BTreeSet};

use crate::frame::{FrameId, TimestampedFrame};

use super::DetectorConfig;

/// Arrivals of one identifier with their contention flags.
#[derive(Debug, Clone, Default)]
pub(crate) struct Stream {
    pub arrivals: Vec<u64>,
    pub contended: Vec<bool>,
}

/// Flags frames that arrived less than a frame time plus a guard after the
/// previous frame: they sat in a queue while the bus was busy.
pub(crate) fn contention(entries: &[TimestampedFrame], ft_us: f64, guard: f64) -> Vec<bool> {
    let limit = ft_us * (1.0 + guard);
    let mut out = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let queued = i > 0 && ((e.arrival_us - entries[i - 1].arrival_us) as f64) < limit;
        out.push(queued);
    }
    out
}

pub(crate) fn streams(entries: &[TimestampedFrame], contended: &[bool]) -> BTreeMap<FrameId, Stream> {
    let mut map: BTreeMap<FrameId, Stream> = BTreeMap::new();
    for (e, &c) in entries.iter().zip(contended) {
        let s = map.entry(e.frame.id()).or_default();
        s.arrivals.push(e.arrival_us);
        s.contended.push(c);
    }
    map
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[m]
    } else {
        (values[m - 1] + values[m]) / 2.0
    })
}

/// Median inter-arrival time over the opening stretch, rounded to the
/// configured quantum. `None` if the stream is too short, not periodic, or
/// paced by the bus itself.
pub(crate) fn learn_period(arrivals: &[u64], config: &DetectorConfig, ft_us: f64) -> Option<f64> {
    let take = arrivals.len().saturating_sub(1).min(config.period_warmup_intervals);
    if take < config.batch_size {
        return None;
    }
    let mut gaps: Vec<f64> = arrivals[..=take]
        .windows(2)
        .map(|w| (w[1] - w[0]) as f64)
        .collect();
    let m = median(&mut gaps)?;
    if m < 10.0 * ft_us {
        return None;
    }
    let regular = gaps.iter().filter(|g| (*g - m).abs() <= 0.1 * m).count();
    if regular * 5 < gaps.len() * 4 {
        return None;
    }
    let q = config.period_quantum_us;
    let rounded = (m / q).round() * q;
    Some(if rounded > 0.0 { rounded } else { m })
}

/// A stretch where an identifier arrives more often than its period allows.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RateRun {
    pub start_us: u64,
    pub end_us: u64,
    /// Largest arrival count in one window over the expected count.
    pub peak_ratio: f64,
    pub duplicates: usize,
}

/// Sliding-window rate check over `N` periods. An arrival is anomalous when
/// the window holds `N + max(3, N/4)` or more messages, or two arrivals
/// closer than half a period.
pub(crate) fn rate_runs(arrivals: &[u64], period_us: f64, batch_size: usize) -> Vec<RateRun> {
    let window = (batch_size as f64 * period_us) as u64;
    let limit = batch_size + (batch_size / 4).max(3);
    let half = period_us / 2.0;
    let mut runs: Vec<RateRun> = Vec::new();
    let mut lo = 0usize;
    let mut dups: std::collections::VecDeque<u64> = Default::default();
    for (j, &a) in arrivals.iter().enumerate() {
        while arrivals[lo] + window <= a {
            lo += 1;
        }
        let count = j - lo + 1;
        if j > 0 && ((a - arrivals[j - 1]) as f64) < half {
            dups.push_back(a);
        }
        while dups.front().is_some_and(|&d| d + window <= a) {
            dups.pop_front();
        }
        let anomalous = count >= limit || dups.len() >= 2;
        if !anomalous {
            continue;
        }
        let ratio = count as f64 / batch_size as f64;
        match runs.last_mut() {
            Some(r) if a <= r.end_us + window => {
                r.end_us = a;
                r.peak_ratio = r.peak_ratio.max(ratio);
                r.duplicates = r.duplicates.max(dups.len());
            }
            _ => runs.push(RateRun {
                start_us: a,
                end_us: a,
                peak_ratio: ratio,
                duplicates: dups.len(),
            }),
        }
    }
    runs
}

/// A stretch of bus-wide disturbance consistent with flooding.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Episode {
    /// First evidence of the flood.
    pub start_us: u64,
    /// End of the last disturbed load bin.
    pub end_us: u64,
    /// Effects attributed to the episode until here (queues draining and
    /// batches that straddle the flood).
    pub window_end_us: u64,
    pub peak_load: f64,
    pub flood_ids: Vec<FrameId>,
}

pub(crate) struct LoadProfile {
    pub bin_us: u64,
    pub load: Vec<f64>,
    pub baseline: f64,
}

pub(crate) fn load_profile(entries: &[TimestampedFrame], ft_us: f64, bin_us: u64) -> LoadProfile {
    let last = entries.last().map_or(0, |e| e.arrival_us);
    let bins = (last / bin_us + 1) as usize;
    let mut counts = vec![0usize; bins];
    for e in entries {
        counts[(e.arrival_us / bin_us) as usize] += 1;
    }
    let load: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64 * ft_us / bin_us as f64).min(1.0))
        .collect();
    // The final bin is usually partial.
    let full = if load.len() > 1 { &load[..load.len() - 1] } else { &load[..] };
    let baseline = median(&mut full.to_vec()).unwrap_or(0.0);
    LoadProfile { bin_us, load, baseline }
}

/// Groups load spikes that are carried by unknown identifiers or that
/// disturb most monitored identifiers at once.
pub(crate) fn episodes(
    entries: &[TimestampedFrame],
    contended: &[bool],
    profile: &LoadProfile,
    monitored: &BTreeSet<FrameId>,
    ft_us: f64,
    drain_us: u64,
) -> Vec<Episode> {
    let bin_us = profile.bin_us;
    let nbins = profile.load.len();
    let mut unknown_load = vec![0.0; nbins];
    let mut disturbed: Vec<BTreeSet<FrameId>> = vec![BTreeSet::new(); nbins];
    let mut first_unknown: Vec<Option<(u64, FrameId)>> = vec![None; nbins];
    let mut first_contended: Vec<Option<u64>> = vec![None; nbins];
    for (e, &c) in entries.iter().zip(contended) {
        let b = (e.arrival_us / bin_us) as usize;
        let id = e.frame.id();
        if monitored.contains(&id) {
            if c {
                disturbed[b].insert(id);
                first_contended[b].get_or_insert(e.arrival_us);
            }
        } else {
            unknown_load[b] += ft_us / bin_us as f64;
            first_unknown[b].get_or_insert((e.arrival_us, id));
        }
    }
    let spike_level = (2.0 * profile.baseline).max(profile.baseline + 0.05);
    let suspect: Vec<bool> = (0..nbins)
        .map(|b| {
            let load = profile.load[b];
            let excess = load - profile.baseline;
            load >= spike_level
                && (unknown_load[b] >= 0.5 * excess
                    || disturbed[b].len() * 2 >= monitored.len().max(1))
        })
        .collect();

    let mut out: Vec<Episode> = Vec::new();
    let mut b = 0;
    while b < nbins {
        if !suspect[b] {
            b += 1;
            continue;
        }
        let first = b;
        let mut last = b;
        // Allow a single quiet bin inside one episode.
        while last + 1 < nbins && (suspect[last + 1] || (last + 2 < nbins && suspect[last + 2])) {
            last += if suspect[last + 1] { 1 } else { 2 };
        }
        let mut flood: BTreeSet<FrameId> = BTreeSet::new();
        for e in entries {
            let eb = (e.arrival_us / bin_us) as usize;
            if eb >= first && eb <= last && !monitored.contains(&e.frame.id()) {
                flood.insert(e.frame.id());
            }
        }
        let start_us = first_unknown[first]
            .map(|(t, _)| t)
            .or(first_contended[first])
            .unwrap_or(first as u64 * bin_us);
        let end_us = (last as u64 + 1) * bin_us;
        out.push(Episode {
            start_us,
            end_us,
            window_end_us: end_us + drain_us,
            peak_load: profile.load[first..=last].iter().copied().fold(0.0, f64::max),
            flood_ids: flood.into_iter().collect(),
        });
        b = last + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubled_rate_is_flagged_quickly() {
        let t = 50_000u64;
        let mut a: Vec<u64> = (0..200).map(|i| i * t).collect();
        // Spoofed copies half a period out of phase from message 100 on.
        a.extend((100..150).map(|i| i * t + 27_000));
        a.sort();
        let runs = rate_runs(&a, t as f64, 20);
        assert_eq!(runs.len(), 1);
        assert!(runs[0].start_us >= 100 * t);
        assert!(runs[0].start_us <= 104 * t, "{}", runs[0].start_us);
    }

    #[test]
    fn steady_stream_has_no_rate_runs() {
        let a: Vec<u64> = (0..1000).map(|i| i * 50_000 + (i % 7) * 3).collect();
        assert!(rate_runs(&a, 50_000.0, 20).is_empty());
    }

    #[test]
    fn period_learning() {
        let cfg = DetectorConfig::default();
        let a: Vec<u64> = (0..300).map(|i| i * 50_006 + 272).collect();
        assert_eq!(learn_period(&a, &cfg, 262.0), Some(50_000.0));
        let flood: Vec<u64> = (0..300).map(|i| i * 262).collect();
        assert_eq!(learn_period(&flood, &cfg, 262.0), None);
        assert_eq!(learn_period(&a[..5], &cfg, 262.0), None);
    }
}
