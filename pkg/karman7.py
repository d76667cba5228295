import numpy as np, time, sys
src=open('karman6.py').read()
src=src.replace("nx, ny = 352, 64","nx, ny = 704, 128").replace("dt = 1.5e-3","dt = 8e-4")
src=src.replace("for l in range(1,4):","for l in range(1,5):")
exec(src)
