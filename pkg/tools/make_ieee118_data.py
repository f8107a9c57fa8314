"""Regenerate the bundled 118-bus study system and SMIB benchmark files.

The 118-bus case uses the standard IEEE 118-bus topology (118 buses, 177
lines, 9 transformers, 54 generating units) with representative per-unit
electrical parameters and the classic generation/load layout.  Bus-level
shunt compensation of the original case is omitted because the network
schema carries shunts on branches only.  Dynamic machine parameters go to a
separate overlay file so they can be swapped without touching the network.

Run from the repository root:  python tools/make_ieee118_data.py
"""

from __future__ import annotations

import json
from pathlib import Path

OUT_DIR = Path(__file__).resolve().parents[1] / "src" / "dsabench" / "data"

# (from, to, r, x, b_total, tap); tap == 0 marks a line (tap 1.0).
BRANCHES = [
    (1, 2, 0.0303, 0.0999, 0.0254, 0),
    (1, 3, 0.0129, 0.0424, 0.01082, 0),
    (4, 5, 0.00176, 0.00798, 0.0021, 0),
    (3, 5, 0.0241, 0.108, 0.0284, 0),
    (5, 6, 0.0119, 0.054, 0.01426, 0),
    (6, 7, 0.00459, 0.0208, 0.0055, 0),
    (8, 9, 0.00244, 0.0305, 1.162, 0),
    (8, 5, 0.0, 0.0267, 0.0, 0.985),
    (9, 10, 0.00258, 0.0322, 1.23, 0),
    (4, 11, 0.0209, 0.0688, 0.01748, 0),
    (5, 11, 0.0203, 0.0682, 0.01738, 0),
    (11, 12, 0.00595, 0.0196, 0.00502, 0),
    (2, 12, 0.0187, 0.0616, 0.01572, 0),
    (3, 12, 0.0484, 0.16, 0.0406, 0),
    (7, 12, 0.00862, 0.034, 0.00874, 0),
    (11, 13, 0.02225, 0.0731, 0.01876, 0),
    (12, 14, 0.0215, 0.0707, 0.01816, 0),
    (13, 15, 0.0744, 0.2444, 0.06268, 0),
    (14, 15, 0.0595, 0.195, 0.0502, 0),
    (12, 16, 0.0212, 0.0834, 0.0214, 0),
    (15, 17, 0.0132, 0.0437, 0.0444, 0),
    (16, 17, 0.0454, 0.1801, 0.0466, 0),
    (17, 18, 0.0123, 0.0505, 0.01298, 0),
    (18, 19, 0.01119, 0.0493, 0.01142, 0),
    (19, 20, 0.0252, 0.117, 0.0298, 0),
    (15, 19, 0.012, 0.0394, 0.0101, 0),
    (20, 21, 0.0183, 0.0849, 0.0216, 0),
    (21, 22, 0.0209, 0.097, 0.0246, 0),
    (22, 23, 0.0342, 0.159, 0.0404, 0),
    (23, 24, 0.0135, 0.0492, 0.0498, 0),
    (23, 25, 0.0156, 0.08, 0.0864, 0),
    (26, 25, 0.0, 0.0382, 0.0, 0.96),
    (25, 27, 0.0318, 0.163, 0.1764, 0),
    (27, 28, 0.01913, 0.0855, 0.0216, 0),
    (28, 29, 0.0237, 0.0943, 0.0238, 0),
    (30, 17, 0.0, 0.0388, 0.0, 0.96),
    (8, 30, 0.00431, 0.0504, 0.514, 0),
    (26, 30, 0.00799, 0.086, 0.908, 0),
    (17, 31, 0.0474, 0.1563, 0.0399, 0),
    (29, 31, 0.0108, 0.0331, 0.0083, 0),
    (23, 32, 0.0317, 0.1153, 0.1173, 0),
    (31, 32, 0.0298, 0.0985, 0.0251, 0),
    (27, 32, 0.0229, 0.0755, 0.01926, 0),
    (15, 33, 0.038, 0.1244, 0.03194, 0),
    (19, 34, 0.0752, 0.247, 0.0632, 0),
    (35, 36, 0.00224, 0.0102, 0.00268, 0),
    (35, 37, 0.011, 0.0497, 0.01318, 0),
    (33, 37, 0.0415, 0.142, 0.0366, 0),
    (34, 36, 0.00871, 0.0268, 0.00568, 0),
    (34, 37, 0.00256, 0.0094, 0.00984, 0),
    (38, 37, 0.0, 0.0375, 0.0, 0.935),
    (37, 39, 0.0321, 0.106, 0.027, 0),
    (37, 40, 0.0593, 0.168, 0.042, 0),
    (30, 38, 0.00464, 0.054, 0.422, 0),
    (39, 40, 0.0184, 0.0605, 0.01552, 0),
    (40, 41, 0.0145, 0.0487, 0.01222, 0),
    (40, 42, 0.0555, 0.183, 0.0466, 0),
    (41, 42, 0.041, 0.135, 0.0344, 0),
    (43, 44, 0.0608, 0.2454, 0.06068, 0),
    (34, 43, 0.0413, 0.1681, 0.04226, 0),
    (44, 45, 0.0224, 0.0901, 0.0224, 0),
    (45, 46, 0.04, 0.1356, 0.0332, 0),
    (46, 47, 0.038, 0.127, 0.0316, 0),
    (46, 48, 0.0601, 0.189, 0.0472, 0),
    (47, 49, 0.0191, 0.0625, 0.01604, 0),
    (42, 49, 0.0715, 0.323, 0.086, 0),
    (42, 49, 0.0715, 0.323, 0.086, 0),
    (45, 49, 0.0684, 0.186, 0.0444, 0),
    (48, 49, 0.0179, 0.0505, 0.01258, 0),
    (49, 50, 0.0267, 0.0752, 0.01874, 0),
    (49, 51, 0.0486, 0.137, 0.0342, 0),
    (51, 52, 0.0203, 0.0588, 0.01396, 0),
    (52, 53, 0.0405, 0.1635, 0.04058, 0),
    (53, 54, 0.0263, 0.122, 0.031, 0),
    (49, 54, 0.073, 0.289, 0.0738, 0),
    (49, 54, 0.0869, 0.291, 0.073, 0),
    (54, 55, 0.0169, 0.0707, 0.0202, 0),
    (54, 56, 0.00275, 0.00955, 0.00732, 0),
    (55, 56, 0.00488, 0.0151, 0.00374, 0),
    (56, 57, 0.0343, 0.0966, 0.0242, 0),
    (50, 57, 0.0474, 0.134, 0.0332, 0),
    (56, 58, 0.0343, 0.0966, 0.0242, 0),
    (51, 58, 0.0255, 0.0719, 0.01788, 0),
    (54, 59, 0.0503, 0.2293, 0.0598, 0),
    (56, 59, 0.0825, 0.251, 0.0569, 0),
    (56, 59, 0.0803, 0.239, 0.0536, 0),
    (55, 59, 0.04739, 0.2158, 0.05646, 0),
    (59, 60, 0.0317, 0.145, 0.0376, 0),
    (59, 61, 0.0328, 0.15, 0.0388, 0),
    (60, 61, 0.00264, 0.0135, 0.01456, 0),
    (60, 62, 0.0123, 0.0561, 0.01468, 0),
    (61, 62, 0.00824, 0.0376, 0.0098, 0),
    (63, 59, 0.0, 0.0386, 0.0, 0.96),
    (63, 64, 0.00172, 0.02, 0.216, 0),
    (64, 61, 0.0, 0.0268, 0.0, 0.985),
    (38, 65, 0.00901, 0.0986, 1.046, 0),
    (64, 65, 0.00269, 0.0302, 0.38, 0),
    (49, 66, 0.018, 0.0919, 0.0248, 0),
    (49, 66, 0.018, 0.0919, 0.0248, 0),
    (62, 66, 0.0482, 0.218, 0.0578, 0),
    (62, 67, 0.0258, 0.117, 0.031, 0),
    (65, 66, 0.0, 0.037, 0.0, 0.935),
    (66, 67, 0.0224, 0.1015, 0.02682, 0),
    (65, 68, 0.00138, 0.016, 0.638, 0),
    (47, 69, 0.0844, 0.2778, 0.07092, 0),
    (49, 69, 0.0985, 0.324, 0.0828, 0),
    (68, 69, 0.0, 0.037, 0.0, 0.935),
    (69, 70, 0.03, 0.127, 0.122, 0),
    (24, 70, 0.00221, 0.4115, 0.10198, 0),
    (70, 71, 0.00882, 0.0355, 0.00878, 0),
    (24, 72, 0.0488, 0.196, 0.0488, 0),
    (71, 72, 0.0446, 0.18, 0.04444, 0),
    (71, 73, 0.00866, 0.0454, 0.01178, 0),
    (70, 74, 0.0401, 0.1323, 0.03368, 0),
    (70, 75, 0.0428, 0.141, 0.036, 0),
    (69, 75, 0.0405, 0.122, 0.124, 0),
    (74, 75, 0.0123, 0.0406, 0.01034, 0),
    (76, 77, 0.0444, 0.148, 0.0368, 0),
    (69, 77, 0.0309, 0.101, 0.1038, 0),
    (75, 77, 0.0601, 0.1999, 0.04978, 0),
    (77, 78, 0.00376, 0.0124, 0.01264, 0),
    (78, 79, 0.00546, 0.0244, 0.00648, 0),
    (77, 80, 0.017, 0.0485, 0.0472, 0),
    (77, 80, 0.0294, 0.105, 0.0228, 0),
    (79, 80, 0.0156, 0.0704, 0.0187, 0),
    (68, 81, 0.00175, 0.0202, 0.808, 0),
    (81, 80, 0.0, 0.037, 0.0, 0.935),
    (77, 82, 0.0298, 0.0853, 0.08174, 0),
    (82, 83, 0.0112, 0.03665, 0.03796, 0),
    (83, 84, 0.0625, 0.132, 0.0258, 0),
    (83, 85, 0.043, 0.148, 0.0348, 0),
    (84, 85, 0.0302, 0.0641, 0.01234, 0),
    (85, 86, 0.035, 0.123, 0.0276, 0),
    (86, 87, 0.02828, 0.2074, 0.0445, 0),
    (85, 88, 0.02, 0.102, 0.0276, 0),
    (85, 89, 0.0239, 0.173, 0.047, 0),
    (88, 89, 0.0139, 0.0712, 0.01934, 0),
    (89, 90, 0.0518, 0.188, 0.0528, 0),
    (89, 90, 0.0238, 0.0997, 0.106, 0),
    (90, 91, 0.0254, 0.0836, 0.0214, 0),
    (89, 92, 0.0099, 0.0505, 0.0548, 0),
    (89, 92, 0.0393, 0.1581, 0.0414, 0),
    (91, 92, 0.0387, 0.1272, 0.03268, 0),
    (92, 93, 0.0258, 0.0848, 0.0218, 0),
    (92, 94, 0.0481, 0.158, 0.0406, 0),
    (93, 94, 0.0223, 0.0732, 0.01876, 0),
    (94, 95, 0.0132, 0.0434, 0.0111, 0),
    (80, 96, 0.0356, 0.182, 0.0494, 0),
    (82, 96, 0.0162, 0.053, 0.0544, 0),
    (94, 96, 0.0269, 0.0869, 0.023, 0),
    (80, 97, 0.0183, 0.0934, 0.0254, 0),
    (80, 98, 0.0238, 0.108, 0.0286, 0),
    (80, 99, 0.0454, 0.206, 0.0546, 0),
    (92, 100, 0.0648, 0.295, 0.0472, 0),
    (94, 100, 0.0178, 0.058, 0.0604, 0),
    (95, 96, 0.0171, 0.0547, 0.01474, 0),
    (96, 97, 0.0173, 0.0885, 0.024, 0),
    (98, 100, 0.0397, 0.179, 0.0476, 0),
    (99, 100, 0.018, 0.0813, 0.0216, 0),
    (100, 101, 0.0277, 0.1262, 0.0328, 0),
    (92, 102, 0.0123, 0.0559, 0.01464, 0),
    (101, 102, 0.0246, 0.112, 0.0294, 0),
    (100, 103, 0.016, 0.0525, 0.0536, 0),
    (100, 104, 0.0451, 0.204, 0.0541, 0),
    (103, 104, 0.0466, 0.1584, 0.0407, 0),
    (103, 105, 0.0535, 0.1625, 0.0408, 0),
    (100, 106, 0.0605, 0.229, 0.062, 0),
    (104, 105, 0.00994, 0.0378, 0.00986, 0),
    (105, 106, 0.014, 0.0547, 0.01434, 0),
    (105, 107, 0.053, 0.183, 0.0472, 0),
    (105, 108, 0.0261, 0.0703, 0.01844, 0),
    (106, 107, 0.053, 0.183, 0.0472, 0),
    (108, 109, 0.0105, 0.0288, 0.0076, 0),
    (103, 110, 0.03906, 0.1813, 0.0461, 0),
    (109, 110, 0.0278, 0.0762, 0.0202, 0),
    (110, 111, 0.022, 0.0755, 0.02, 0),
    (110, 112, 0.0247, 0.064, 0.062, 0),
    (17, 113, 0.00913, 0.0301, 0.00768, 0),
    (32, 113, 0.0615, 0.203, 0.0518, 0),
    (32, 114, 0.0135, 0.0612, 0.01628, 0),
    (27, 115, 0.0164, 0.0741, 0.01972, 0),
    (114, 115, 0.0023, 0.0104, 0.00276, 0),
    (68, 116, 0.00034, 0.00405, 0.164, 0),
    (12, 117, 0.0329, 0.14, 0.0358, 0),
    (75, 118, 0.0145, 0.0481, 0.01198, 0),
    (76, 118, 0.0164, 0.0544, 0.01356, 0),
]

BUSES_345KV = {8, 9, 10, 26, 30, 38, 63, 64, 65, 68, 81, 116}

# (bus, p_set MW, voltage setpoint, qmin MVAr, qmax MVAr); slack is bus 69.
GENERATORS = [
    (1, 0.0, 0.955, -30, 60),
    (4, 0.0, 0.998, -30, 60),
    (6, 0.0, 0.990, -30, 60),
    (8, 0.0, 1.015, -30, 60),
    (10, 450.0, 1.050, -147, 200),
    (12, 85.0, 0.990, -35, 120),
    (15, 0.0, 0.970, -30, 60),
    (18, 0.0, 0.973, -30, 60),
    (19, 0.0, 0.962, -30, 60),
    (24, 0.0, 0.992, -30, 60),
    (25, 220.0, 1.050, -47, 140),
    (26, 314.0, 1.015, -100, 250),
    (27, 0.0, 0.968, -30, 60),
    (31, 7.0, 0.967, -30, 60),
    (32, 0.0, 0.963, -30, 60),
    (34, 0.0, 0.984, -30, 60),
    (36, 0.0, 0.980, -30, 60),
    (40, 0.0, 0.970, -30, 60),
    (42, 0.0, 0.985, -30, 60),
    (46, 19.0, 1.005, -30, 80),
    (49, 204.0, 1.025, -85, 210),
    (54, 48.0, 0.955, -30, 100),
    (55, 0.0, 0.952, -30, 60),
    (56, 0.0, 0.954, -30, 60),
    (59, 155.0, 0.985, -60, 180),
    (61, 160.0, 0.995, -100, 200),
    (62, 0.0, 0.998, -20, 60),
    (65, 391.0, 1.005, -67, 250),
    (66, 392.0, 1.050, -67, 250),
    (69, 516.4, 1.035, -300, 400),
    (70, 0.0, 0.984, -10, 60),
    (72, 0.0, 0.980, -30, 60),
    (73, 0.0, 0.991, -30, 60),
    (74, 0.0, 0.958, -6, 60),
    (76, 0.0, 0.943, -8, 60),
    (77, 0.0, 1.006, -20, 70),
    (80, 477.0, 1.040, -165, 280),
    (85, 0.0, 0.985, -8, 60),
    (87, 4.0, 1.015, -100, 100),
    (89, 607.0, 1.005, -210, 300),
    (90, 0.0, 0.985, -300, 300),
    (91, 0.0, 0.980, -100, 100),
    (92, 0.0, 0.990, -3, 60),
    (99, 0.0, 1.010, -100, 100),
    (100, 252.0, 1.017, -50, 155),
    (103, 40.0, 1.010, -15, 80),
    (104, 0.0, 0.971, -8, 60),
    (105, 0.0, 0.965, -8, 60),
    (107, 0.0, 0.952, -200, 200),
    (110, 0.0, 0.973, -8, 60),
    (111, 36.0, 0.980, -100, 120),
    (112, 0.0, 0.975, -100, 100),
    (113, 0.0, 0.993, -100, 200),
    (116, 0.0, 1.005, -1000, 1000),
]

SLACK_BUS = 69

# (bus, P MW, Q MVAr)
LOADS = [
    (1, 51, 27), (2, 20, 9), (3, 39, 10), (4, 39, 12), (6, 52, 22),
    (7, 19, 2), (8, 28, 0), (11, 70, 23), (12, 47, 10), (13, 34, 16),
    (14, 14, 1), (15, 90, 30), (16, 25, 10), (17, 11, 3), (18, 60, 34),
    (19, 45, 25), (20, 18, 3), (21, 14, 8), (22, 10, 5), (23, 7, 3),
    (24, 13, 0), (27, 71, 13), (28, 17, 7), (29, 24, 4), (31, 43, 27),
    (32, 59, 23), (33, 23, 9), (34, 59, 26), (35, 33, 9), (36, 31, 17),
    (39, 27, 11), (40, 66, 23), (41, 37, 10), (42, 96, 23), (43, 18, 7),
    (44, 16, 8), (45, 53, 22), (46, 28, 10), (47, 34, 0), (48, 20, 11),
    (49, 87, 30), (50, 17, 4), (51, 17, 8), (52, 18, 5), (53, 23, 11),
    (54, 113, 32), (55, 63, 22), (56, 84, 18), (57, 12, 3), (58, 12, 3),
    (59, 277, 113), (60, 78, 3), (62, 77, 14), (66, 39, 18), (67, 28, 7),
    (70, 66, 20), (72, 12, 0), (73, 6, 0), (74, 68, 27), (75, 47, 11),
    (76, 68, 36), (77, 61, 28), (78, 71, 26), (79, 39, 32), (80, 130, 26),
    (82, 54, 27), (83, 20, 10), (84, 11, 7), (85, 24, 15), (86, 21, 10),
    (88, 48, 10), (90, 163, 42), (91, 10, 0), (92, 65, 10), (93, 12, 7),
    (94, 30, 16), (95, 42, 31), (96, 38, 15), (97, 15, 9), (98, 34, 8),
    (99, 42, 0), (100, 37, 18), (101, 22, 15), (102, 5, 3), (103, 23, 16),
    (104, 38, 25), (105, 31, 26), (106, 43, 16), (107, 50, 12), (108, 2, 1),
    (109, 8, 3), (110, 39, 30), (112, 68, 13), (113, 6, 0), (114, 8, 3),
    (115, 22, 7), (116, 184, 0), (117, 20, 8), (118, 33, 15),
]


def machine_rating(p_set: float) -> float:
    # p_set == 0 units are synchronous condensers; 60 MVA is a typical class
    if p_set <= 0:
        return 60.0
    return max(100.0, round(1.15 * p_set / 5.0) * 5.0)


def dynamic_params(rating: float):
    h = min(max(3.0 * rating / 100.0, 2.0), 8.0)
    xdp = 0.25 * 100.0 / rating
    return round(h, 4), round(xdp, 5), 1.0


def main():
    gen_buses = {g[0] for g in GENERATORS}
    load_buses = {ld[0] for ld in LOADS}
    buses = []
    for bid in range(1, 119):
        kind = "slack" if bid == SLACK_BUS else ("PV" if bid in gen_buses else "PQ")
        vset = None
        for g in GENERATORS:
            if g[0] == bid:
                vset = g[2]
        buses.append({
            "id": bid,
            "kind": kind,
            "base_kv": 345.0 if bid in BUSES_345KV else 138.0,
            "voltage_setpoint": vset,
            "is_zero_injection": bid not in gen_buses | load_buses,
        })

    branches = []
    n_xfmr = 0
    for f, t, r, x, b, tap in BRANCHES:
        is_xfmr = tap != 0
        n_xfmr += is_xfmr
        branches.append({
            "from_bus": f, "to_bus": t, "r": r, "x": x, "b_shunt": b,
            "tap": tap if is_xfmr else 1.0, "in_service": True,
        })
    assert len(branches) == 186, len(branches)
    assert n_xfmr == 9, n_xfmr

    machines = []
    overlay = []
    for bus, p_set, _vset, qmin, qmax in GENERATORS:
        rating = machine_rating(p_set)
        machines.append({
            "bus": bus, "rating_mva": rating, "p_set": p_set,
            "q_limits": [float(qmin), float(qmax)], "is_solar": False,
        })
        h, xdp, d = dynamic_params(rating)
        overlay.append({"bus": bus, "h": h, "xd_prime": xdp, "d": d})
    assert len(machines) == 54

    loads = [{"bus": b, "p": float(p), "q": float(q)} for b, p, q in LOADS]

    network = {
        "base_mva": 100.0,
        "buses": buses,
        "branches": branches,
        "machines": machines,
        "loads": loads,
    }

    smib = {
        "base_mva": 100.0,
        "buses": [
            {"id": 1, "kind": "slack", "base_kv": 230.0, "voltage_setpoint": 1.0},
            {"id": 2, "kind": "PV", "base_kv": 230.0, "voltage_setpoint": 1.0},
        ],
        "branches": [
            {"from_bus": 2, "to_bus": 1, "r": 0.0, "x": 0.4, "b_shunt": 0.0},
            {"from_bus": 2, "to_bus": 1, "r": 0.0, "x": 0.4, "b_shunt": 0.0},
        ],
        "machines": [
            {"bus": 1, "rating_mva": 10000.0, "p_set": 0.0,
             "q_limits": [-9999.0, 9999.0], "h": 20000.0, "xd_prime": 0.05,
             "d": 0.0, "is_solar": False},
            {"bus": 2, "rating_mva": 100.0, "p_set": 80.0,
             "q_limits": [-100.0, 100.0], "h": 3.5, "xd_prime": 0.3,
             "d": 0.0, "is_solar": False},
        ],
        "loads": [],
    }

    OUT_DIR.mkdir(parents=True, exist_ok=True)
    (OUT_DIR / "ieee118.json").write_text(json.dumps(network, indent=1))
    (OUT_DIR / "machines118.json").write_text(json.dumps({"machines": overlay}, indent=1))
    (OUT_DIR / "smib.json").write_text(json.dumps(smib, indent=1))

    total_load = sum(ld[1] for ld in LOADS)
    total_gen = sum(g[1] for g in GENERATORS)
    zi = [b["id"] for b in buses if b["is_zero_injection"]]
    print(f"buses: {len(buses)}  branches: {len(branches)} ({len(branches) - n_xfmr} lines, {n_xfmr} xfmr)")
    print(f"machines: {len(machines)}  loads: {len(loads)}")
    print(f"total load {total_load} MW, dispatched generation {total_gen} MW")
    print(f"zero-injection buses: {zi}")


if __name__ == "__main__":
    main()
