import init, { price_curve, elo_tournament, mock_market_run } from "./pkg/bazaar_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function esc(s) {
  return String(s).replace(/[&<>"]/g, (c) => ({ "&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;" })[c]);
}

function fail(target, e) {
  target.innerHTML = `<p class="err">${esc(e)}</p>`;
}

function plotCurve() {
  const svg = $("pc-plot");
  try {
    const data = JSON.parse(price_curve(num("pc-max"), 121, num("pc-scale")));
    const w = svg.width.baseVal.value, h = svg.height.baseVal.value, pad = 30;
    const maxC = data.points[data.points.length - 1].citations;
    const x = (c) => pad + (c / maxC) * (w - 2 * pad);
    const y = (p) => h - pad - (p / data.max_price) * (h - 2 * pad);
    const path = data.points.map((p, i) => `${i ? "L" : "M"}${x(p.citations).toFixed(1)},${y(p.price).toFixed(1)}`).join("");
    svg.innerHTML =
      `<line x1="${pad}" y1="${h - pad}" x2="${w - pad}" y2="${h - pad}" stroke="#999"/>` +
      `<line x1="${pad}" y1="${pad}" x2="${pad}" y2="${h - pad}" stroke="#999"/>` +
      `<path d="${path}" fill="none" stroke="#1761a0" stroke-width="2"/>` +
      `<text x="${w - pad}" y="${h - 8}" text-anchor="end" font-size="11">${maxC} citations</text>` +
      `<text x="${pad + 4}" y="${pad - 8}" font-size="11">${data.max_price} credits</text>`;
  } catch (e) {
    svg.innerHTML = `<text x="10" y="20" fill="#b00">${esc(e)}</text>`;
  }
}

function rate() {
  const out = $("elo-out");
  try {
    const r = JSON.parse(elo_tournament($("elo-in").value, num("elo-n"), num("elo-seed"), num("elo-k")));
    const rows = [...r.ratings]
      .sort((a, b) => b.mean_rating - a.mean_rating)
      .map((s) => `<tr><td>${esc(s.contestant)}</td><td>${s.mean_rating.toFixed(1)}</td><td>${s.rating_std.toFixed(1)}</td></tr>`)
      .join("");
    out.innerHTML = `<table><tr><th>contestant</th><th>mean</th><th>std</th></tr>${rows}</table>`;
  } catch (e) {
    fail(out, e);
  }
}

function renderNode(node, children) {
  const buys = node.purchases
    .map((p) => `<div class="buy">bought ${esc(p.passage)} from ${esc(p.vendor)} for ${p.price}: ${esc(p.title ?? "")}</div>`)
    .join("");
  const kids = (children.get(node.id) ?? []).map((c) => renderNode(c, children)).join("");
  const answer = node.answer ? `<div class="ans">#${node.refine_order} ${esc(node.answer)}</div>` : "";
  return `<li><span class="q">${esc(node.question)}</span>${buys}${answer}${kids ? `<ul class="tree">${kids}</ul>` : ""}</li>`;
}

function runMarket() {
  const out = $("mk-out");
  try {
    const r = JSON.parse(
      mock_market_run($("mk-q").value, num("mk-budget"), $("mk-insp").checked, num("mk-fp"), num("mk-seed")),
    );
    const children = new Map();
    for (const n of r.nodes) {
      if (n.parent !== null) children.set(n.parent, [...(children.get(n.parent) ?? []), n]);
    }
    out.innerHTML =
      `<p>spent ${r.spent} of ${r.budget} credits; ${r.nodes.length} questions; stopped: ${esc(r.stop_reasons.join(", ") || "none")}</p>` +
      `<ul class="tree">${renderNode(r.nodes[0], children)}</ul>` +
      `<h3>Final answer</h3><p class="ans">${esc(r.answer)}</p>`;
  } catch (e) {
    fail(out, e);
  }
}

await init();
$("pc-go").onclick = plotCurve;
$("elo-go").onclick = rate;
$("mk-go").onclick = runMarket;
plotCurve();
rate();
