use ndarray::{Array1, Array2, Axis};

#[test]
fn descent_on_real_data() {
    let text = std::fs::read_to_string("/tmp/probedata.txt").unwrap();
    let mut xs_v = Vec::new();
    let mut ps_v = Vec::new();
    for line in text.lines() {
        let (x, p) = line.split_once('|').unwrap();
        xs_v.push(x.split_whitespace().map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>());
        ps_v.push(p.split_whitespace().map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>());
    }
    let n = xs_v.len(); let dim = xs_v[0].len();
    let xs = Array2::from_shape_fn((n, dim), |(i, j)| xs_v[i][j]);
    let ps = Array2::from_shape_fn((n, 2), |(i, j)| ps_v[i][j]);
    let lambda = 1e-2;
    let obj = |w: &Array2<f64>, b: &Array1<f64>| {
        let logits = xs.dot(&w.t());
        let mut loss = 0.0;
        let mut dl: Array2<f64> = Array2::zeros(logits.raw_dim());
        for i in 0..n {
            let row = logits.row(i).to_owned() + b;
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e = row.mapv(|l| (l - m).exp());
            let s = e.sum();
            for j in 0..2 {
                let q: f64 = e[j] / s;
                let p: f64 = ps[[i, j]];
                if p > 0.0 { loss += p * (p.ln() - q.ln()); }
                dl[[i, j]] = q - p;
            }
        }
        loss += lambda * w.iter().map(|v| v * v).sum::<f64>();
        let dw = dl.t().dot(&xs) + &(2.0 * lambda * w);
        let db = dl.sum_axis(Axis(0));
        (loss, dw, db)
    };
    let mut w: Array2<f64> = Array2::zeros((2, dim));
    let mut b: Array1<f64> = Array1::zeros(2);
    let (mut loss, mut dw, mut db) = obj(&w, &b);
    let data_scale = 1.0 + xs.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let w_scale = data_scale + 2.0 * lambda;
    let mut step = 1.0;
    let mut accepted_total = 0;
    for iter in 0..50000 {
        let dir_w = dw.mapv(|g| g / w_scale);
        let dir_b = db.mapv(|g| g / data_scale);
        let gdot = dw.iter().zip(dir_w.iter()).map(|(g, d)| g * d).sum::<f64>()
            + db.iter().zip(dir_b.iter()).map(|(g, d)| g * d).sum::<f64>();
        let mut acc = false;
        for _ in 0..60 {
            let wt = &w - &(step * &dir_w);
            let bt = &b - &(step * &dir_b);
            let (lt, dwt, dbt) = obj(&wt, &bt);
            if lt <= loss - 1e-4 * step * gdot {
                let delta = loss - lt;
                w = wt; b = bt; loss = lt; dw = dwt; db = dbt;
                step *= 1.25; acc = true; accepted_total += 1;
                if iter % 5000 == 0 {
                    println!("iter {iter}: loss {loss:.9} delta {delta:.3e} step {step:.3e} gdot {gdot:.3e} |W| {:.2}", w.iter().map(|v| v*v).sum::<f64>().sqrt());
                }
                break;
            }
            step *= 0.5;
        }
        if !acc { println!("exhausted at {iter} loss {loss:.9}"); break; }
    }
    println!("final loss {loss:.9}, accepted {accepted_total}");
}
