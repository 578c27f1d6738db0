/*
 * MPFR step loop for quadratic systems  x' = A x + Phi(x),  phi_p = <Q_p x, x>.
 *
 * This file mirrors quadseries/series.py and quadseries/stepper.py operation
 * by operation (same products, same summation order, same rounding), so the
 * compiled and the pure-Python steppers produce bit-identical results.
 * Values cross the Python boundary as exact hexadecimal strings ("%Ra").
 */
#define PY_SSIZE_T_CLEAN
#include <Python.h>
#include <mpfr.h>
#include <stdlib.h>

enum { RUNNING = 0, DONE = 1, ESCAPED = 2, TRUNCATION_FAILED = 3 };

typedef struct {
    PyObject_HEAD
    int ready;
    mpfr_prec_t prec;
    int n, na, nq, max_degree, way, ball_dims;
    int *a_row, *a_col;
    mpfr_t *a_val;
    int *q_p, *q_r, *q_c;
    mpfr_t *q_val;
    mpfr_t mu, c1, h2low, delta, eps, T, r2;
    mpfr_t *center;
    mpfr_t *x, *au, *psi, *xs;
    mpfr_t *U;   /* coefficient rows of the last step, row i at U[i*n] */
    int u_rows;  /* allocated rows */
    mpfr_t t, tstart, dt, dtabs, tau, rem, h1, h2, pw, nrm, s, tmp, acc;
    int degree;
    long N, l_max, l_max_last, d_max;
    int n_max;
    mpfr_t dtabs_max, t_at_nmax, t_at_nmax_last, t_at_dtmax;
    int status;
} Stepper;

/* ---------------------------------------------------------------- helpers */

static int set_hex(mpfr_t dst, PyObject *obj)
{
    const char *s = PyUnicode_AsUTF8(obj);
    char *end = NULL;
    if (s == NULL)
        return -1;
    mpfr_strtofr(dst, s, &end, 16, MPFR_RNDN);
    if (end == s || *end != '\0') {
        PyErr_Format(PyExc_ValueError, "bad hexadecimal real %R", obj);
        return -1;
    }
    return 0;
}

static PyObject *get_hex(mpfr_t v)
{
    char *buf = NULL;
    PyObject *out;
    if (mpfr_asprintf(&buf, "%Ra", v) < 0)
        return PyErr_NoMemory();
    out = PyUnicode_FromString(buf);
    mpfr_free_str(buf);
    return out;
}

static mpfr_t *alloc_vec(int len, mpfr_prec_t prec)
{
    int i;
    mpfr_t *v = (mpfr_t *)PyMem_Calloc(len > 0 ? len : 1, sizeof(mpfr_t));
    if (v == NULL)
        return NULL;
    for (i = 0; i < len; i++) {
        mpfr_init2(v[i], prec);
        mpfr_set_zero(v[i], 1);
    }
    return v;
}

static void free_vec(mpfr_t *v, int len)
{
    int i;
    if (v == NULL)
        return;
    for (i = 0; i < len; i++)
        mpfr_clear(v[i]);
    PyMem_Free(v);
}

static int read_hex_list(PyObject *seq, mpfr_t *dst, int len, const char *what)
{
    int i;
    PyObject *fast = PySequence_Fast(seq, what);
    if (fast == NULL)
        return -1;
    if (PySequence_Fast_GET_SIZE(fast) != len) {
        PyErr_Format(PyExc_ValueError, "%s: expected %d values", what, len);
        Py_DECREF(fast);
        return -1;
    }
    for (i = 0; i < len; i++) {
        if (set_hex(dst[i], PySequence_Fast_GET_ITEM(fast, i)) < 0) {
            Py_DECREF(fast);
            return -1;
        }
    }
    Py_DECREF(fast);
    return 0;
}

static PyObject *vec_to_list(mpfr_t *v, int len)
{
    int i;
    PyObject *out = PyList_New(len);
    if (out == NULL)
        return NULL;
    for (i = 0; i < len; i++) {
        PyObject *h = get_hex(v[i]);
        if (h == NULL) {
            Py_DECREF(out);
            return NULL;
        }
        PyList_SET_ITEM(out, i, h);
    }
    return out;
}

static int ensure_rows(Stepper *S, int rows)
{
    int old = S->u_rows, i;
    mpfr_t *grown;
    if (rows <= old)
        return 0;
    if (rows < 2 * old)
        rows = 2 * old;
    /* raw allocator: this may run without the GIL */
    grown = (mpfr_t *)PyMem_RawRealloc(S->U, (size_t)rows * S->n * sizeof(mpfr_t));
    if (grown == NULL)
        return -1;
    /* mpfr_t is a struct holding a limb pointer; moving it is safe */
    for (i = old * S->n; i < rows * S->n; i++)
        mpfr_init2(grown[i], S->prec);
    S->U = grown;
    S->u_rows = rows;
    return 0;
}

/* ------------------------------------------------------------- lifecycle */

static void Stepper_clear(Stepper *S)
{
    int i;
    if (!S->ready)
        return;
    free_vec(S->a_val, S->na);
    free_vec(S->q_val, S->nq);
    PyMem_Free(S->a_row); PyMem_Free(S->a_col);
    PyMem_Free(S->q_p); PyMem_Free(S->q_r); PyMem_Free(S->q_c);
    free_vec(S->center, S->ball_dims);
    free_vec(S->x, S->n); free_vec(S->au, S->n); free_vec(S->psi, S->n); free_vec(S->xs, S->n);
    if (S->U != NULL) {
        for (i = 0; i < S->u_rows * S->n; i++)
            mpfr_clear(S->U[i]);
        PyMem_RawFree(S->U);
    }
    mpfr_clears(S->mu, S->c1, S->h2low, S->delta, S->eps, S->T, S->r2,
                S->t, S->tstart, S->dt, S->dtabs, S->tau, S->rem, S->h1, S->h2,
                S->pw, S->nrm, S->s, S->tmp, S->acc,
                S->dtabs_max, S->t_at_nmax, S->t_at_nmax_last, S->t_at_dtmax, (mpfr_ptr)0);
    S->ready = 0;
}

static void Stepper_dealloc(Stepper *S)
{
    Stepper_clear(S);
    Py_TYPE(S)->tp_free((PyObject *)S);
}

static void reset_state(Stepper *S)
{
    mpfr_set_zero(S->t, 1);
    mpfr_set_zero(S->tstart, 1);
    mpfr_set_zero(S->dt, 1);
    mpfr_set_zero(S->dtabs, 1);
    mpfr_set_zero(S->dtabs_max, 1);
    mpfr_set_zero(S->t_at_nmax, 1);
    mpfr_set_zero(S->t_at_nmax_last, 1);
    mpfr_set_zero(S->t_at_dtmax, 1);
    S->degree = 0;
    S->N = 0;
    S->l_max = 0;
    S->l_max_last = 0;
    S->d_max = 0;
    S->n_max = 0;
    S->status = RUNNING;
}

/*
 * Stepper(prec, n, a_entries, q_entries, mu, c1, h2low, delta, eps_pw,
 *         max_degree, center, r2)
 * a_entries: [(row, col, hex)], q_entries: [(p, row, col, hex)]
 * center: hex list of length ball_dims (0 disables the ball test)
 */
static int Stepper_init(Stepper *S, PyObject *args, PyObject *kwds)
{
    long prec;
    int n, max_degree, i;
    PyObject *a_entries, *q_entries, *mu, *c1, *h2low, *delta, *eps, *center, *r2;
    PyObject *fa = NULL, *fq = NULL, *fc = NULL;

    if (!PyArg_ParseTuple(args, "liOOOOOOOiOO", &prec, &n, &a_entries, &q_entries,
                          &mu, &c1, &h2low, &delta, &eps, &max_degree, &center, &r2))
        return -1;
    if (prec < MPFR_PREC_MIN || prec > 1000000 || n < 1 || max_degree < 1) {
        PyErr_SetString(PyExc_ValueError, "invalid stepper dimensions");
        return -1;
    }
    Stepper_clear(S);
    S->prec = (mpfr_prec_t)prec;
    S->n = n;
    S->max_degree = max_degree;
    S->way = 1;

    fa = PySequence_Fast(a_entries, "a_entries");
    fq = PySequence_Fast(q_entries, "q_entries");
    fc = PySequence_Fast(center, "center");
    if (fa == NULL || fq == NULL || fc == NULL)
        goto fail_early;
    S->na = (int)PySequence_Fast_GET_SIZE(fa);
    S->nq = (int)PySequence_Fast_GET_SIZE(fq);
    S->ball_dims = (int)PySequence_Fast_GET_SIZE(fc);
    if (S->ball_dims > n) {
        PyErr_SetString(PyExc_ValueError, "ball has more coordinates than the system");
        goto fail_early;
    }

    S->a_row = PyMem_Calloc(S->na + 1, sizeof(int));
    S->a_col = PyMem_Calloc(S->na + 1, sizeof(int));
    S->q_p = PyMem_Calloc(S->nq + 1, sizeof(int));
    S->q_r = PyMem_Calloc(S->nq + 1, sizeof(int));
    S->q_c = PyMem_Calloc(S->nq + 1, sizeof(int));
    S->a_val = alloc_vec(S->na, S->prec);
    S->q_val = alloc_vec(S->nq, S->prec);
    S->center = alloc_vec(S->ball_dims, S->prec);
    S->x = alloc_vec(n, S->prec);
    S->au = alloc_vec(n, S->prec);
    S->psi = alloc_vec(n, S->prec);
    S->xs = alloc_vec(n, S->prec);
    S->U = NULL;
    S->u_rows = 0;
    mpfr_inits2(S->prec, S->mu, S->c1, S->h2low, S->delta, S->eps, S->T, S->r2,
                S->t, S->tstart, S->dt, S->dtabs, S->tau, S->rem, S->h1, S->h2,
                S->pw, S->nrm, S->s, S->tmp, S->acc,
                S->dtabs_max, S->t_at_nmax, S->t_at_nmax_last, S->t_at_dtmax, (mpfr_ptr)0);
    S->ready = 1;
    if (!S->a_row || !S->a_col || !S->q_p || !S->q_r || !S->q_c || !S->a_val ||
        !S->q_val || !S->center || !S->x || !S->au || !S->psi || !S->xs) {
        PyErr_NoMemory();
        goto fail;
    }
    if (ensure_rows(S, 16) < 0) {
        PyErr_NoMemory();
        goto fail;
    }

    for (i = 0; i < S->na; i++) {
        PyObject *e = PySequence_Fast_GET_ITEM(fa, i), *h;
        if (!PyArg_ParseTuple(e, "iiO", &S->a_row[i], &S->a_col[i], &h) || set_hex(S->a_val[i], h) < 0)
            goto fail;
        if (S->a_row[i] < 0 || S->a_row[i] >= n || S->a_col[i] < 0 || S->a_col[i] >= n) {
            PyErr_SetString(PyExc_ValueError, "linear entry index out of range");
            goto fail;
        }
    }
    for (i = 0; i < S->nq; i++) {
        PyObject *e = PySequence_Fast_GET_ITEM(fq, i), *h;
        if (!PyArg_ParseTuple(e, "iiiO", &S->q_p[i], &S->q_r[i], &S->q_c[i], &h) || set_hex(S->q_val[i], h) < 0)
            goto fail;
        if (S->q_p[i] < 0 || S->q_p[i] >= n || S->q_r[i] < 0 || S->q_r[i] >= n ||
            S->q_c[i] < 0 || S->q_c[i] >= n) {
            PyErr_SetString(PyExc_ValueError, "quadratic entry index out of range");
            goto fail;
        }
    }
    if (set_hex(S->mu, mu) < 0 || set_hex(S->c1, c1) < 0 || set_hex(S->h2low, h2low) < 0 ||
        set_hex(S->delta, delta) < 0 || set_hex(S->eps, eps) < 0 || set_hex(S->r2, r2) < 0)
        goto fail;
    if (read_hex_list(fc, S->center, S->ball_dims, "center") < 0)
        goto fail;
    reset_state(S);
    mpfr_set_zero(S->T, 1);
    S->status = DONE;
    Py_DECREF(fa); Py_DECREF(fq); Py_DECREF(fc);
    return 0;

fail:
    Stepper_clear(S);
fail_early:
    Py_XDECREF(fa); Py_XDECREF(fq); Py_XDECREF(fc);
    return -1;
}

/* ------------------------------------------------------------------ core */

static void horner(Stepper *S, mpfr_t at, mpfr_t *out)
{
    int n = S->n, m = S->degree, p, i;
    for (p = 0; p < n; p++) {
        mpfr_set(S->acc, S->U[m * n + p], MPFR_RNDN);
        for (i = m - 1; i >= 0; i--) {
            mpfr_mul(S->acc, S->acc, at, MPFR_RNDN);
            mpfr_add(S->acc, S->acc, S->U[i * n + p], MPFR_RNDN);
        }
        mpfr_set(out[p], S->acc, MPFR_RNDN);
    }
}

static int inside_ball(Stepper *S)
{
    int i;
    if (S->ball_dims == 0)
        return 1;
    mpfr_set_zero(S->s, 1);
    for (i = 0; i < S->ball_dims; i++) {
        mpfr_sub(S->tmp, S->x[i], S->center[i], MPFR_RNDN);
        mpfr_mul(S->tmp, S->tmp, S->tmp, MPFR_RNDN);
        mpfr_add(S->s, S->s, S->tmp, MPFR_RNDN);
    }
    return mpfr_lessequal_p(S->s, S->r2);
}

/* One step of the certified-radius Taylor method.  Returns the new status, or -1 when
 * out of memory (no Python error is set: this runs without the GIL). */
static int do_step(Stepper *S)
{
    int n = S->n, p, i, j, e, final = 0, cmp;

    if (S->status != RUNNING)
        return S->status;

    /* convergence radius from the 1-norm of the start state */
    mpfr_set_zero(S->h1, 1);
    for (p = 0; p < n; p++) {
        mpfr_abs(S->tmp, S->x[p], MPFR_RNDN);
        mpfr_add(S->h1, S->h1, S->tmp, MPFR_RNDN);
    }
    if (mpfr_cmp_ui(S->h1, 1) > 0) {
        mpfr_mul(S->h2, S->mu, S->h1, MPFR_RNDN);
        mpfr_mul(S->h2, S->h2, S->h1, MPFR_RNDN);
        mpfr_mul(S->tmp, S->c1, S->h1, MPFR_RNDN);
        mpfr_add(S->h2, S->h2, S->tmp, MPFR_RNDN);
    } else {
        mpfr_set(S->h2, S->h2low, MPFR_RNDN);
    }
    mpfr_add(S->tau, S->h2, S->delta, MPFR_RNDN);
    mpfr_ui_div(S->tau, 1, S->tau, MPFR_RNDN);

    /* clip the last step onto the horizon */
    mpfr_sub(S->rem, S->T, S->t, MPFR_RNDN);
    mpfr_set(S->tstart, S->t, MPFR_RNDN);
    if (mpfr_greater_p(S->tau, S->rem)) {
        mpfr_set(S->dtabs, S->rem, MPFR_RNDN);
        final = 1;
    } else {
        mpfr_add(S->tmp, S->t, S->tau, MPFR_RNDN);
        cmp = mpfr_cmp(S->tmp, S->T);
        if (cmp > 0) {
            mpfr_set(S->dtabs, S->rem, MPFR_RNDN);
            final = 1;
        } else {
            mpfr_set(S->dtabs, S->tau, MPFR_RNDN);
            final = (cmp == 0);
        }
    }
    if (S->way > 0)
        mpfr_set(S->dt, S->dtabs, MPFR_RNDN);
    else
        mpfr_neg(S->dt, S->dtabs, MPFR_RNDN);

    /* Taylor coefficients until the tail criterion holds */
    for (p = 0; p < n; p++)
        mpfr_set(S->U[p], S->x[p], MPFR_RNDN);
    mpfr_set_ui(S->pw, 1, MPFR_RNDN);
    S->degree = -1;
    for (j = 1; j <= S->max_degree; j++) {
        if (ensure_rows(S, j + 1) < 0)
            return -1;
        for (p = 0; p < n; p++) {
            mpfr_set_zero(S->au[p], 1);
            mpfr_set_zero(S->psi[p], 1);
        }
        for (e = 0; e < S->na; e++) {
            mpfr_mul(S->tmp, S->a_val[e], S->U[(j - 1) * n + S->a_col[e]], MPFR_RNDN);
            mpfr_add(S->au[S->a_row[e]], S->au[S->a_row[e]], S->tmp, MPFR_RNDN);
        }
        for (e = 0; e < S->nq; e++) {
            int r = S->q_r[e], c = S->q_c[e];
            mpfr_set_zero(S->s, 1);
            for (i = 0; i < j; i++) {
                mpfr_mul(S->tmp, S->U[i * n + r], S->U[(j - 1 - i) * n + c], MPFR_RNDN);
                mpfr_add(S->s, S->s, S->tmp, MPFR_RNDN);
            }
            mpfr_mul(S->tmp, S->q_val[e], S->s, MPFR_RNDN);
            mpfr_add(S->psi[S->q_p[e]], S->psi[S->q_p[e]], S->tmp, MPFR_RNDN);
        }
        for (p = 0; p < n; p++) {
            mpfr_add(S->acc, S->au[p], S->psi[p], MPFR_RNDN);
            mpfr_div_ui(S->U[j * n + p], S->acc, (unsigned long)j, MPFR_RNDN);
        }
        mpfr_mul(S->pw, S->pw, S->dtabs, MPFR_RNDN);
        mpfr_set_zero(S->nrm, 1);
        for (p = 0; p < n; p++) {
            mpfr_abs(S->tmp, S->U[j * n + p], MPFR_RNDN);
            mpfr_add(S->nrm, S->nrm, S->tmp, MPFR_RNDN);
        }
        mpfr_mul(S->nrm, S->nrm, S->pw, MPFR_RNDN);
        if (mpfr_less_p(S->nrm, S->eps)) {
            S->degree = j;
            break;
        }
    }
    if (S->degree < 0) {
        S->degree = 0;
        return TRUNCATION_FAILED;
    }

    horner(S, S->dt, S->x);
    if (final)
        mpfr_set(S->t, S->T, MPFR_RNDN);
    else
        mpfr_add(S->t, S->tstart, S->dtabs, MPFR_RNDN);

    S->N += 1;
    if (S->N == 1 || S->degree > S->n_max) {
        S->n_max = S->degree;
        S->l_max = S->N;
        if (S->way > 0) mpfr_set(S->t_at_nmax, S->t, MPFR_RNDN);
        else mpfr_neg(S->t_at_nmax, S->t, MPFR_RNDN);
    }
    if (S->degree == S->n_max) {
        S->l_max_last = S->N;
        if (S->way > 0) mpfr_set(S->t_at_nmax_last, S->t, MPFR_RNDN);
        else mpfr_neg(S->t_at_nmax_last, S->t, MPFR_RNDN);
    }
    if (S->N == 1 || mpfr_greater_p(S->dtabs, S->dtabs_max)) {
        mpfr_set(S->dtabs_max, S->dtabs, MPFR_RNDN);
        S->d_max = S->N;
        if (S->way > 0) mpfr_set(S->t_at_dtmax, S->t, MPFR_RNDN);
        else mpfr_neg(S->t_at_dtmax, S->t, MPFR_RNDN);
    }
    if (!inside_ball(S))
        S->status = ESCAPED;
    else if (final)
        S->status = DONE;
    return S->status;
}

/* ------------------------------------------------------------- methods */

#define REQUIRE_READY(S) \
    if (!(S)->ready) { PyErr_SetString(PyExc_RuntimeError, "stepper not initialised"); return NULL; }

static PyObject *Stepper_reset(Stepper *S, PyObject *args)
{
    PyObject *x0, *T;
    int way;
    REQUIRE_READY(S);
    if (!PyArg_ParseTuple(args, "OOi", &x0, &T, &way))
        return NULL;
    if (way != 1 && way != -1) {
        PyErr_SetString(PyExc_ValueError, "way must be +1 or -1");
        return NULL;
    }
    if (read_hex_list(x0, S->x, S->n, "x0") < 0 || set_hex(S->T, T) < 0)
        return NULL;
    reset_state(S);
    S->way = way;
    Py_RETURN_NONE;
}

static PyObject *Stepper_step(Stepper *S, PyObject *Py_UNUSED(ignored))
{
    int st;
    REQUIRE_READY(S);
    st = do_step(S);
    if (st < 0)
        return PyErr_NoMemory();
    return PyLong_FromLong(st);
}

/* run(max_steps): step until not running or max_steps taken (<=0: unlimited) */
static PyObject *Stepper_run(Stepper *S, PyObject *args)
{
    long max_steps = 0, k = 0;
    int st = S->status;
    REQUIRE_READY(S);
    if (!PyArg_ParseTuple(args, "|l", &max_steps))
        return NULL;
    while (S->status == RUNNING && (max_steps <= 0 || k < max_steps)) {
        long chunk = 0;
        Py_BEGIN_ALLOW_THREADS
        while (S->status == RUNNING && (max_steps <= 0 || k < max_steps) && chunk < 65536) {
            st = do_step(S);
            if (st < 0 || st == TRUNCATION_FAILED)
                break;
            k++;
            chunk++;
        }
        Py_END_ALLOW_THREADS
        if (st < 0) {
            PyErr_NoMemory();
            return NULL;
        }
        if (st == TRUNCATION_FAILED)
            break;
        if (PyErr_CheckSignals() < 0)
            return NULL;
    }
    if (st != TRUNCATION_FAILED)
        st = S->status;
    return PyLong_FromLong(st);
}

static PyObject *Stepper_state(Stepper *S, PyObject *Py_UNUSED(ignored))
{
    REQUIRE_READY(S);
    return vec_to_list(S->x, S->n);
}

static PyObject *Stepper_coefficients(Stepper *S, PyObject *Py_UNUSED(ignored))
{
    int i;
    PyObject *out;
    REQUIRE_READY(S);
    out = PyList_New(S->degree + 1);
    if (out == NULL)
        return NULL;
    for (i = 0; i <= S->degree; i++) {
        PyObject *row = vec_to_list(S->U + (size_t)i * S->n, S->n);
        if (row == NULL) {
            Py_DECREF(out);
            return NULL;
        }
        PyList_SET_ITEM(out, i, row);
    }
    return out;
}

static PyObject *Stepper_info(Stepper *S, PyObject *Py_UNUSED(ignored))
{
    REQUIRE_READY(S);
    return Py_BuildValue("{s:i,s:i,s:l,s:i,s:l,s:l,s:l,s:N,s:N,s:N,s:N,s:N,s:N,s:N,s:N}",
                         "status", S->status, "degree", S->degree, "N", S->N,
                         "n_max", S->n_max, "l_max", S->l_max, "l_max_last", S->l_max_last,
                         "d_max", S->d_max,
                         "t", get_hex(S->t), "tstart", get_hex(S->tstart),
                         "dt", get_hex(S->dt), "dtabs", get_hex(S->dtabs),
                         "dtabs_max", get_hex(S->dtabs_max),
                         "t_at_nmax", get_hex(S->t_at_nmax),
                         "t_at_nmax_last", get_hex(S->t_at_nmax_last),
                         "t_at_dtmax", get_hex(S->t_at_dtmax));
}

static PyObject *Stepper_eval(Stepper *S, PyObject *args)
{
    PyObject *at;
    REQUIRE_READY(S);
    if (!PyArg_ParseTuple(args, "O", &at))
        return NULL;
    if (set_hex(S->rem, at) < 0)
        return NULL;
    horner(S, S->rem, S->xs);
    return vec_to_list(S->xs, S->n);
}

/*
 * sample(k0, dtP, k_last, origin) -> (k_next, values)
 * Dense output at grid times t_k = k*dtP lying in the last step.  With an
 * origin (hex list) the Euclidean distances |X_k - origin| are returned,
 * otherwise the states.
 */
static PyObject *Stepper_sample(Stepper *S, PyObject *args)
{
    long k0, k_last, k;
    PyObject *dtP_obj, *origin_obj, *out = NULL;
    mpfr_t dtP, tk, off;
    mpfr_t *origin = NULL;
    int n = S->n, p, use_origin;
    REQUIRE_READY(S);
    if (!PyArg_ParseTuple(args, "lOlO", &k0, &dtP_obj, &k_last, &origin_obj))
        return NULL;
    if (k0 < 0) {
        PyErr_SetString(PyExc_ValueError, "grid index must be non-negative");
        return NULL;
    }
    use_origin = origin_obj != Py_None;
    mpfr_inits2(S->prec, dtP, tk, off, (mpfr_ptr)0);
    if (set_hex(dtP, dtP_obj) < 0)
        goto done;
    if (use_origin) {
        origin = alloc_vec(n, S->prec);
        if (origin == NULL || read_hex_list(origin_obj, origin, n, "origin") < 0)
            goto done;
    }
    out = PyList_New(0);
    if (out == NULL)
        goto done;
    for (k = k0; k <= k_last; k++) {
        PyObject *item;
        int cmp;
        mpfr_mul_ui(tk, dtP, (unsigned long)k, MPFR_RNDN);
        cmp = mpfr_cmp(tk, S->t);
        if (cmp > 0 || (cmp == 0 && S->status == RUNNING))
            break;
        mpfr_sub(off, tk, S->tstart, MPFR_RNDN);
        if (S->way < 0)
            mpfr_neg(off, off, MPFR_RNDN);
        horner(S, off, S->xs);
        if (use_origin) {
            mpfr_set_zero(S->s, 1);
            for (p = 0; p < n; p++) {
                mpfr_sub(S->tmp, S->xs[p], origin[p], MPFR_RNDN);
                mpfr_mul(S->tmp, S->tmp, S->tmp, MPFR_RNDN);
                mpfr_add(S->s, S->s, S->tmp, MPFR_RNDN);
            }
            mpfr_sqrt(S->s, S->s, MPFR_RNDN);
            item = get_hex(S->s);
        } else {
            item = vec_to_list(S->xs, n);
        }
        if (item == NULL || PyList_Append(out, item) < 0) {
            Py_XDECREF(item);
            Py_CLEAR(out);
            goto done;
        }
        Py_DECREF(item);
    }
done:
    mpfr_clears(dtP, tk, off, (mpfr_ptr)0);
    free_vec(origin, use_origin ? n : 0);
    if (out == NULL)
        return NULL;
    return Py_BuildValue("(lN)", k, out);
}

/*
 * scan(origin, dtP, k_last, threshold) -> (status, k_next, [(k, d_hex), ...])
 * Runs the (freshly reset) stepper to its horizon, measures the Euclidean
 * distance to `origin` at every grid time k*dtP, k = 0..k_last, and reports
 * each interior k with d[k-1] > d[k] < d[k+1] and d[k] < threshold.
 */
static PyObject *Stepper_scan(Stepper *S, PyObject *args)
{
    long k_last, k = 0, seen = 0, steps = 0;
    PyObject *origin_obj, *dtP_obj, *thr_obj, *events = NULL, *res = NULL;
    mpfr_t dtP, thr, tk, off, d0, d1, d2;
    mpfr_t *origin = NULL;
    int n = S->n, p, st = S->status;
    REQUIRE_READY(S);
    if (!PyArg_ParseTuple(args, "OOlO", &origin_obj, &dtP_obj, &k_last, &thr_obj))
        return NULL;
    mpfr_inits2(S->prec, dtP, thr, tk, off, d0, d1, d2, (mpfr_ptr)0);
    origin = alloc_vec(n, S->prec);
    if (origin == NULL || read_hex_list(origin_obj, origin, n, "origin") < 0 ||
        set_hex(dtP, dtP_obj) < 0 || set_hex(thr, thr_obj) < 0)
        goto done;
    events = PyList_New(0);
    if (events == NULL)
        goto done;
    while (S->status == RUNNING) {
        st = do_step(S);
        if (st < 0) {
            PyErr_NoMemory();
            goto done;
        }
        if (st == TRUNCATION_FAILED)
            break;
        for (; k <= k_last; k++) {
            int cmp;
            mpfr_mul_ui(tk, dtP, (unsigned long)k, MPFR_RNDN);
            cmp = mpfr_cmp(tk, S->t);
            if (cmp > 0 || (cmp == 0 && S->status == RUNNING))
                break;
            mpfr_sub(off, tk, S->tstart, MPFR_RNDN);
            if (S->way < 0)
                mpfr_neg(off, off, MPFR_RNDN);
            horner(S, off, S->xs);
            mpfr_set_zero(S->s, 1);
            for (p = 0; p < n; p++) {
                mpfr_sub(S->tmp, S->xs[p], origin[p], MPFR_RNDN);
                mpfr_mul(S->tmp, S->tmp, S->tmp, MPFR_RNDN);
                mpfr_add(S->s, S->s, S->tmp, MPFR_RNDN);
            }
            /* d0, d1, d2 hold d[k-2], d[k-1], d[k] */
            mpfr_swap(d0, d1);
            mpfr_swap(d1, d2);
            mpfr_sqrt(d2, S->s, MPFR_RNDN);
            seen++;
            if (seen >= 3 && mpfr_greater_p(d0, d1) && mpfr_less_p(d1, d2) && mpfr_less_p(d1, thr)) {
                PyObject *ev = Py_BuildValue("(lN)", k - 1, get_hex(d1));
                if (ev == NULL || PyList_Append(events, ev) < 0) {
                    Py_XDECREF(ev);
                    goto done;
                }
                Py_DECREF(ev);
            }
        }
        if ((++steps & 0xFFFF) == 0 && PyErr_CheckSignals() < 0)
            goto done;
    }
    if (st != TRUNCATION_FAILED)
        st = S->status;
    res = Py_BuildValue("(ilO)", st, k, events);
done:
    Py_XDECREF(events);
    mpfr_clears(dtP, thr, tk, off, d0, d1, d2, (mpfr_ptr)0);
    free_vec(origin, n);
    return res;
}

static PyMethodDef Stepper_methods[] = {
    {"reset", (PyCFunction)Stepper_reset, METH_VARARGS, "reset(x0, T, way)"},
    {"step", (PyCFunction)Stepper_step, METH_NOARGS, "advance one step; returns status"},
    {"run", (PyCFunction)Stepper_run, METH_VARARGS, "run([max_steps]) -> status"},
    {"state", (PyCFunction)Stepper_state, METH_NOARGS, "current state (hex)"},
    {"coefficients", (PyCFunction)Stepper_coefficients, METH_NOARGS, "Taylor rows of the last step"},
    {"info", (PyCFunction)Stepper_info, METH_NOARGS, "status, clocks and step statistics"},
    {"eval", (PyCFunction)Stepper_eval, METH_VARARGS, "evaluate the last step polynomial"},
    {"sample", (PyCFunction)Stepper_sample, METH_VARARGS, "dense output on a uniform grid"},
    {"scan", (PyCFunction)Stepper_scan, METH_VARARGS, "run to the horizon detecting grid rapprochements"},
    {NULL, NULL, 0, NULL},
};

static PyTypeObject StepperType = {
    PyVarObject_HEAD_INIT(NULL, 0)
    .tp_name = "quadseries._kernel.Stepper",
    .tp_basicsize = sizeof(Stepper),
    .tp_flags = Py_TPFLAGS_DEFAULT,
    .tp_new = PyType_GenericNew,
    .tp_init = (initproc)Stepper_init,
    .tp_dealloc = (destructor)Stepper_dealloc,
    .tp_methods = Stepper_methods,
};

/*
 * max_distance(coarse, fine, interior) -> (hex, status_coarse, status_fine)
 * Runs both steppers to completion and returns the largest 1-norm gap
 * between them at each coarse step end and `interior` evenly spaced points
 * inside every coarse step.
 */
static PyObject *max_distance(PyObject *self, PyObject *args)
{
    Stepper *C, *F;
    int interior, i, p, n, cst, fst;
    mpfr_t gap, dist, off, u, at;
    PyObject *res;
    if (!PyArg_ParseTuple(args, "O!O!i", &StepperType, &C, &StepperType, &F, &interior))
        return NULL;
    REQUIRE_READY(C);
    REQUIRE_READY(F);
    if (C->n != F->n || C->prec != F->prec || C->way != F->way || interior < 0) {
        PyErr_SetString(PyExc_ValueError, "incompatible steppers");
        return NULL;
    }
    n = C->n;
    mpfr_inits2(C->prec, gap, dist, off, u, at, (mpfr_ptr)0);
    mpfr_set_zero(gap, 1);
    cst = C->status;
    fst = F->status;
    while (cst == RUNNING) {
        cst = do_step(C);
        if (cst < 0)
            goto error;
        if (cst == TRUNCATION_FAILED || cst == ESCAPED)
            break;
        for (i = 1; i <= interior + 1; i++) {
            if (i <= interior) {
                mpfr_mul_ui(off, C->dtabs, (unsigned long)i, MPFR_RNDN);
                mpfr_div_ui(off, off, (unsigned long)(interior + 1), MPFR_RNDN);
                mpfr_add(u, C->tstart, off, MPFR_RNDN);
                if (C->way < 0)
                    mpfr_neg(off, off, MPFR_RNDN);
                horner(C, off, C->xs);
            } else {
                mpfr_set(u, C->t, MPFR_RNDN);
                for (p = 0; p < n; p++)
                    mpfr_set(C->xs[p], C->x[p], MPFR_RNDN);
            }
            while (fst == RUNNING && mpfr_less_p(F->t, u)) {
                fst = do_step(F);
                if (fst < 0)
                    goto error;
            }
            if (fst == TRUNCATION_FAILED || fst == ESCAPED || F->N == 0)
                goto finish;
            mpfr_sub(at, u, F->tstart, MPFR_RNDN);
            if (F->way < 0)
                mpfr_neg(at, at, MPFR_RNDN);
            horner(F, at, F->xs);
            mpfr_set_zero(dist, 1);
            for (p = 0; p < n; p++) {
                mpfr_sub(C->tmp, C->xs[p], F->xs[p], MPFR_RNDN);
                mpfr_abs(C->tmp, C->tmp, MPFR_RNDN);
                mpfr_add(dist, dist, C->tmp, MPFR_RNDN);
            }
            if (mpfr_greater_p(dist, gap))
                mpfr_set(gap, dist, MPFR_RNDN);
        }
    }
finish:
    res = Py_BuildValue("(Nii)", get_hex(gap), cst, fst);
    mpfr_clears(gap, dist, off, u, at, (mpfr_ptr)0);
    return res;
error:
    mpfr_clears(gap, dist, off, u, at, (mpfr_ptr)0);
    return PyErr_NoMemory();
}

static PyMethodDef module_methods[] = {
    {"max_distance", max_distance, METH_VARARGS, "largest gap between two runs"},
    {NULL, NULL, 0, NULL},
};

static struct PyModuleDef kernel_module = {
    PyModuleDef_HEAD_INIT, "_kernel", "MPFR step loop for quadratic systems", -1, module_methods,
};

PyMODINIT_FUNC PyInit__kernel(void)
{
    PyObject *m;
    if (PyType_Ready(&StepperType) < 0)
        return NULL;
    m = PyModule_Create(&kernel_module);
    if (m == NULL)
        return NULL;
    Py_INCREF(&StepperType);
    if (PyModule_AddObject(m, "Stepper", (PyObject *)&StepperType) < 0) {
        Py_DECREF(&StepperType);
        Py_DECREF(m);
        return NULL;
    }
    PyModule_AddIntConstant(m, "RUNNING", RUNNING);
    PyModule_AddIntConstant(m, "DONE", DONE);
    PyModule_AddIntConstant(m, "ESCAPED", ESCAPED);
    PyModule_AddIntConstant(m, "TRUNCATION_FAILED", TRUNCATION_FAILED);
    PyModule_AddStringConstant(m, "MPFR_VERSION", mpfr_get_version());
    return m;
}
