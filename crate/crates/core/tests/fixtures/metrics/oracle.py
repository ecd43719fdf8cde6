"""Brute-force reference values for the metrics fixture.

Run from this directory: python3 oracle.py > expected.json
"""
import json
import math
import string


def tok(s):
    s = s.lower()
    s = "".join(ch for ch in s if ch not in string.punctuation)
    return s.split()


def grams(t, n):
    return [tuple(t[i:i + n]) for i in range(len(t) - n + 1)]


def count(t, n):
    out = {}
    for g in grams(t, n):
        out[g] = out.get(g, 0) + 1
    return out


def bleu(cands, refs, max_n):
    m = [0] * max_n
    tot = [0] * max_n
    c_len = r_len = 0
    for c, rs in zip(cands, refs):
        c_len += len(c)
        best = None
        for r in rs:
            key = (abs(len(r) - len(c)), len(r))
            if best is None or key < best:
                best = key
        r_len += best[1]
        for n in range(1, max_n + 1):
            cc = count(c, n)
            for g, k in cc.items():
                mx = max(count(r, n).get(g, 0) for r in rs)
                m[n - 1] += min(k, mx)
                tot[n - 1] += k
    if any(x == 0 for x in m):
        return 0.0
    lp = sum(math.log(a / b) for a, b in zip(m, tot)) / max_n
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(lp)


def lcs(a, b):
    t = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a)):
        for j in range(len(b)):
            t[i + 1][j + 1] = t[i][j] + 1 if a[i] == b[j] else max(t[i][j + 1], t[i + 1][j])
    return t[-1][-1]


def rouge(c, rs, beta=1.2):
    best = 0.0
    for r in rs:
        l = lcs(c, r)
        if l == 0:
            continue
        p, rec = l / len(c), l / len(r)
        best = max(best, (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p))
    return best


def cider(cands, refs):
    docs = []
    for rs in refs:
        s = set()
        for r in rs:
            for n in range(1, 5):
                s.update(grams(r, n))
        docs.append(s)
    N = len(refs)

    def idf(g):
        df = sum(1 for d in docs if g in d)
        return math.log(N / max(1, df))

    def vec(t, n):
        c = count(t, n)
        return c, {g: k * idf(g) for g, k in c.items()}

    scores = []
    for c, rs in zip(cands, refs):
        total = 0.0
        for r in rs:
            pen = math.exp(-((len(c) - len(r)) ** 2) / 72.0)
            s = 0.0
            for n in range(1, 5):
                cc, cv = vec(c, n)
                rc, rv = vec(r, n)
                nc = math.sqrt(sum(v * v for v in cv.values()))
                nr = math.sqrt(sum(v * v for v in rv.values()))
                if nc == 0 and nr == 0:
                    sim = 1.0 if cc and cc == rc else 0.0
                elif nc == 0 or nr == 0:
                    sim = 0.0
                else:
                    sim = sum(min(cv[g], rv[g]) * rv[g] for g in cv if g in rv) / (nc * nr)
                s += sim * pen
            total += s / 4
        scores.append(10 * total / len(rs))
    return scores


def main():
    preds = [json.loads(l) for l in open("predictions.jsonl") if l.strip()]
    refs = {r["id"]: r["captions"] for r in map(json.loads, open("references.jsonl")) if r}
    preds.sort(key=lambda p: p["id"])
    cands = [tok(p["caption"]) for p in preds]
    rsets = [[tok(c) for c in refs[p["id"]]] for p in preds]
    out = {f"bleu_{n}": bleu(cands, rsets, n) for n in range(1, 5)}
    out["rouge_l"] = sum(rouge(c, rs) for c, rs in zip(cands, rsets)) / len(cands)
    per = cider(cands, rsets)
    out["cider_d"] = sum(per) / len(per)
    out["cider_d_per_example"] = {p["id"]: s for p, s in zip(preds, per)}
    print(json.dumps(out, indent=2))


main()
