"""
Non-dominated sorting and protected selection
=============================================

Selection keeps P of the candidates on (error, params).  Plain NSGA-III
fills whole fronts and breaks the last one with reference directions.
The protected variant also ranks by (-accuracy gain, params), so a large
model that is still improving quickly is kept even while its error is
poor.
"""

import numpy as np

from evonas.moea import merged_layers, nondominated_sort, nsga3_select, pnsga3_select

objs = np.array([[0.10, 100], [0.20, 50], [0.30, 20], [0.25, 120], [0.35, 60], [0.40, 300]])
speeds = np.array([0.01, 0.01, 0.01, 0.01, 0.01, 0.20])

print("fronts on (error, params):", nondominated_sort(objs).fronts)
print("merged layers:            ", merged_layers(objs, speeds))

###############################################################################
# Candidate 5 is the largest and has the worst error, but gained 0.2 accuracy
# since the last evaluation.

for P in (3, 4, 5):
    print(f"P={P}: nsga3 {nsga3_select(objs, P).tolist()}  pnsga3 {pnsga3_select(objs, speeds, P).tolist()}")

###############################################################################
# With equal speeds the second ranking adds nothing new and both selections
# agree.

flat = np.zeros(len(objs))
print("equal speeds:", pnsga3_select(objs, flat, 4).tolist(), nsga3_select(objs, 4).tolist())
