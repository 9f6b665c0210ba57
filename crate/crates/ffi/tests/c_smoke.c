#include <stdio.h>
#include <string.h>
#include "coss.h"

int main(void) {
    const char *ids[] = {"u1", "u2", "u3", "u4"};
    double xs[] = {3.0, 2.0, 4.0, 1.0};
    CossUnits *u = coss_units_new();
    for (int i = 0; i < 4; i++) {
        if (coss_units_push(u, ids[i], xs[i]) != COSS_STATUS_OK) return 1;
    }
    CossPlan *plan = NULL;
    if (coss_allocate(u, COSS_STRATEGY_COSS, 7, COSS_PARITY_TREATMENT_FIRST, &plan) != COSS_STATUS_OK) return 2;
    for (size_t i = 0; i < coss_plan_len(plan); i++) {
        CossArm arm;
        int64_t pair;
        coss_plan_get(plan, i, &arm, &pair);
        printf("%s,%s,%lld\n", coss_plan_id_at(plan, i), arm == COSS_ARM_TREATMENT ? "T" : "C", (long long)pair);
    }
    coss_plan_free(plan);

    CossUnits *empty = coss_units_new();
    CossStatus s = coss_allocate(empty, COSS_STRATEGY_COSS, 7, COSS_PARITY_TREATMENT_FIRST, &plan);
    printf("status=%d error=%s\n", (int)s, coss_last_error_message());
    coss_units_free(empty);
    coss_units_free(u);
    return 0;
}
